//! AUC, Logloss and relative improvement over a base model.

use serde::{Deserialize, Serialize};

use crate::autodiff::bce_value;
use crate::error::{CtrlError, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks in `O(N log N)`.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CtrlError::Metric("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral, so the count stays exact.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, midrank (start + 1 + end) / 2
        let twice_mid = (start + 1 + end) as u128;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1.0).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        start = end;
    }
    let p = positives as u128;
    // twice the Mann-Whitney U statistic
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / 2.0 / (positives as f64 * negatives as f64))
}

/// Mean binary cross-entropy with `1e-12` clamping inside the logs.
pub fn logloss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(CtrlError::Metric(format!("prediction {bad} outside [0, 1]")));
    }
    Ok(bce_value(scores, labels))
}

/// Relative AUC improvement over a base model, in percent.
pub fn relaimpr(measured_auc: f64, base_auc: f64) -> Result<f64> {
    if !(base_auc > 0.5) {
        return Err(CtrlError::Metric(format!("base AUC {base_auc} must exceed 0.5")));
    }
    Ok(((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0)
}

fn check_inputs(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(CtrlError::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(CtrlError::Metric("no examples".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(CtrlError::Metric(format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CtrlError::Metric("non-finite score".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub split: String,
    pub auc: f64,
    pub logloss: f64,
    /// Relative improvement over `base`, in percent.
    pub relaimpr: Option<f64>,
    pub base: Option<String>,
    pub n_examples: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn new(name: impl Into<String>, split: impl Into<String>, scores: &[f64], labels: &[f64], seed: u64) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            split: split.into(),
            auc: auc(scores, labels)?,
            logloss: logloss(scores, labels)?,
            relaimpr: None,
            base: None,
            n_examples: scores.len(),
            seed,
        })
    }

    pub fn with_base(mut self, base: &EvalReport) -> Result<Self> {
        self.relaimpr = Some(relaimpr(self.auc, base.auc)?);
        self.base = Some(base.name.clone());
        Ok(self)
    }
}

/// Aligned text table, one report per row.
pub fn format_table(reports: &[EvalReport]) -> String {
    let header = ["run", "split", "auc", "logloss", "relaimpr", "base", "n", "seed"];
    let rows: Vec<[String; 8]> = reports
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                r.split.clone(),
                format!("{:.4}", r.auc),
                format!("{:.4}", r.logloss),
                r.relaimpr.map_or("-".into(), |v| format!("{v:.2}%")),
                r.base.clone().unwrap_or_else(|| "-".into()),
                r.n_examples.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header.map(String::from));
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn brute(scores: &[f64], labels: &[f64]) -> f64 {
        let mut twice_wins = 0u64;
        let (mut p, mut n) = (0u64, 0u64);
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1.0 {
                continue;
            }
            p += 1;
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0.0 {
                    continue;
                }
                if scores[i] > scores[j] {
                    twice_wins += 2;
                } else if scores[i] == scores[j] {
                    twice_wins += 1;
                }
            }
        }
        n += labels.iter().filter(|&&y| y == 0.0).count() as u64;
        twice_wins as f64 / 2.0 / (p as f64 * n as f64)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.4, 0.3], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
        assert!(auc(&[0.1], &[0.5]).is_err());
    }

    #[test]
    fn logloss_examples() {
        assert_abs_diff_eq!(logloss(&[0.5; 4], &[0.0, 1.0, 1.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(logloss(&[0.25], &[1.0]).unwrap(), 4f64.ln(), epsilon = 1e-12);
        assert!(logloss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-11);
        assert!(logloss(&[1.5], &[1.0]).is_err());
    }

    #[test]
    fn relaimpr_examples() {
        assert_eq!(relaimpr(0.7, 0.7).unwrap(), 0.0);
        assert!(relaimpr(0.7, 0.5).is_err());
        assert_abs_diff_eq!(relaimpr(0.6, 0.55).unwrap(), 100.0, epsilon = 1e-9);
    }

    #[test]
    fn table_is_aligned() {
        let base = EvalReport::new("no_align", "test", &[0.2, 0.7, 0.8, 0.9], &[0.0, 1.0, 0.0, 1.0], 1).unwrap();
        let ctrl = EvalReport::new("ctrl", "test", &[0.2, 0.7, 0.1, 0.9], &[0.0, 1.0, 0.0, 1.0], 1)
            .unwrap()
            .with_base(&base)
            .unwrap();
        let t = format_table(&[base, ctrl]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("run"));
        assert!(lines[2].contains("100.00%"));
    }

    proptest! {
        #[test]
        fn auc_equals_pair_count(
            raw in prop::collection::vec((0u8..6, any::<bool>()), 2..120)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
            let labels: Vec<f64> = raw.iter().map(|(_, y)| f64::from(u8::from(*y))).collect();
            prop_assume!(labels.contains(&1.0) && labels.contains(&0.0));
            prop_assert_eq!(auc(&scores, &labels).unwrap(), brute(&scores, &labels));
            let affine: Vec<f64> = scores.iter().map(|s| 2.0 * s + 1.0).collect();
            let squashed: Vec<f64> = scores.iter().map(|&s| crate::autodiff::sigmoid(s)).collect();
            prop_assert_eq!(auc(&affine, &labels).unwrap(), auc(&scores, &labels).unwrap());
            prop_assert_eq!(auc(&squashed, &labels).unwrap(), auc(&scores, &labels).unwrap());
        }
    }
}
