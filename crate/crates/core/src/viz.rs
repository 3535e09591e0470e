//! Embedding dumps of both towers and a deterministic 2-D PCA projection.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::align::{alignment_gap, AlignmentGap};
use crate::autodiff::Tensor;
use crate::error::{CtrlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Tab,
    Text,
}

impl Modality {
    fn as_str(self) -> &'static str {
        match self {
            Self::Tab => "tab",
            Self::Text => "text",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub row_id: usize,
    pub modality: Modality,
    pub values: Vec<f64>,
}

/// Interleaves `(tab_i, text_i)` records, two per row.
pub fn embedding_records(row_ids: &[usize], tab: &Tensor, text: &Tensor) -> Result<Vec<EmbeddingRecord>> {
    if tab.shape() != text.shape() || tab.shape().len() != 2 || tab.rows() != row_ids.len() {
        return Err(CtrlError::data(format!(
            "embedding shapes {:?} and {:?} do not match {} rows",
            tab.shape(),
            text.shape(),
            row_ids.len()
        )));
    }
    let mut out = Vec::with_capacity(2 * row_ids.len());
    for (i, &row_id) in row_ids.iter().enumerate() {
        out.push(EmbeddingRecord {
            row_id,
            modality: Modality::Tab,
            values: tab.row(i).to_vec(),
        });
        out.push(EmbeddingRecord {
            row_id,
            modality: Modality::Text,
            values: text.row(i).to_vec(),
        });
    }
    Ok(out)
}

pub fn write_embeddings_csv(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.values.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["row_id".to_string(), "modality".to_string()];
    header.extend((0..dim).map(|k| format!("e{k}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in records {
        let mut rec = vec![r.row_id.to_string(), r.modality.as_str().to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CtrlError::io(path, e))
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |msg: &str| CtrlError::at_row(i + 1, msg.to_string());
        let row_id = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad row_id"))?;
        let modality = match rec.get(1) {
            Some("tab") => Modality::Tab,
            Some("text") => Modality::Text,
            _ => return Err(bad("modality must be `tab` or `text`")),
        };
        let values = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|_| bad("non-numeric embedding value")))
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord { row_id, modality, values });
    }
    if out.is_empty() {
        return Err(CtrlError::data(format!("{} holds no embeddings", path.display())));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> CtrlError {
    CtrlError::data(format!("{}: {e}", path.display()))
}

/// Paired versus unpaired cosine over the records of both modalities.
pub fn records_gap(records: &[EmbeddingRecord]) -> Result<AlignmentGap> {
    let mut tab = Vec::new();
    let mut text = Vec::new();
    let mut ids = Vec::new();
    for r in records.iter().filter(|r| r.modality == Modality::Tab) {
        let partner = records
            .iter()
            .find(|t| t.modality == Modality::Text && t.row_id == r.row_id)
            .ok_or_else(|| CtrlError::data(format!("row {} has no text embedding", r.row_id)))?;
        tab.extend_from_slice(&r.values);
        text.extend_from_slice(&partner.values);
        ids.push(r.row_id);
    }
    let dim = records.first().map_or(0, |r| r.values.len());
    alignment_gap(&Tensor::new(vec![ids.len(), dim], tab)?, &Tensor::new(vec![ids.len(), dim], text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection2d {
    pub points: Vec<[f64; 2]>,
    /// Share of total variance captured by each component.
    pub explained: [f64; 2],
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
    /// Set when the data has fewer than two directions of variance; the
    /// missing component is zero.
    pub rank_deficient: bool,
}

/// Top-two principal components of the pooled points. Each component is
/// signed so its largest-magnitude loading is positive.
pub fn project_2d(points: &[Vec<f64>]) -> Result<Projection2d> {
    if points.len() < 3 {
        return Err(CtrlError::data(format!("PCA needs at least 3 points, got {}", points.len())));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(CtrlError::data("PCA points must share a positive dimension"));
    }
    let n = points.len();
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    let mut components = [vec![0.0; dim], vec![0.0; dim]];
    let mut explained = [0.0; 2];
    let mut rank_deficient = false;
    for k in 0..2 {
        let Some(&idx) = order.get(k) else {
            rank_deficient = true;
            continue;
        };
        let lambda = eig.eigenvalues[idx];
        if !(lambda > tol) {
            rank_deficient = true;
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        explained[k] = lambda / total;
        components[k] = v;
    }
    if rank_deficient {
        log::warn!("PCA input has fewer than two directions of variance");
    }
    let points = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let proj = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [proj(&components[0]), proj(&components[1])]
        })
        .collect();
    Ok(Projection2d {
        points,
        explained,
        components,
        mean,
        rank_deficient,
    })
}

pub fn write_projection_csv(path: &Path, records: &[EmbeddingRecord], proj: &Projection2d) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["row_id", "modality", "x", "y"]).map_err(|e| csv_error(path, e))?;
    for (r, p) in records.iter().zip(&proj.points) {
        w.write_record([r.row_id.to_string(), r.modality.as_str().to_string(), p[0].to_string(), p[1].to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CtrlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::normal;

    #[test]
    fn records_come_in_pairs() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let recs = embedding_records(&[4, 5, 6], &t, &t).unwrap();
        assert_eq!(recs.len(), 6);
        assert_eq!(recs.iter().filter(|r| r.modality == Modality::Text).count(), 3);
        let gap = records_gap(&recs).unwrap();
        assert_abs_diff_eq!(gap.paired, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, 1e-17, 3.0, 4.0, 5.0]).unwrap();
        let recs = embedding_records(&[0, 1], &t, &t).unwrap();
        write_embeddings_csv(&path, &recs).unwrap();
        assert_eq!(read_embeddings_csv(&path).unwrap(), recs);
    }

    #[test]
    fn planar_points_are_reconstructed() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let coeffs = normal(&mut rng, &[50, 2], 1.0);
        let basis = [[1.0, 2.0, 0.0, -1.0, 0.5], [0.0, 1.0, 1.0, 1.0, -2.0]];
        let offset = [3.0, -1.0, 0.5, 0.0, 2.0];
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|i| (0..5).map(|k| offset[k] + coeffs.row(i)[0] * basis[0][k] + coeffs.row(i)[1] * basis[1][k]).collect())
            .collect();
        let p = project_2d(&pts).unwrap();
        assert_abs_diff_eq!(p.explained[0] + p.explained[1], 1.0, epsilon = 1e-10);
        for (i, xy) in p.points.iter().enumerate() {
            for k in 0..5 {
                let rec = p.mean[k] + xy[0] * p.components[0][k] + xy[1] * p.components[1][k];
                assert_abs_diff_eq!(rec, pts[i][k], epsilon = 1e-9);
            }
        }
        assert!(!p.rank_deficient);
    }

    #[test]
    fn isotropic_sample_splits_variance_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = normal(&mut rng, &[10_000, 2], 1.0);
        let pts: Vec<Vec<f64>> = (0..10_000).map(|i| t.row(i).to_vec()).collect();
        let p = project_2d(&pts).unwrap();
        assert!((p.explained[0] - 0.5).abs() < 0.05 && (p.explained[1] - 0.5).abs() < 0.05, "{:?}", p.explained);
    }

    #[test]
    fn duplicated_data_projects_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = normal(&mut rng, &[20, 4], 1.0);
        let pts: Vec<Vec<f64>> = (0..20).map(|i| t.row(i).to_vec()).collect();
        let doubled: Vec<Vec<f64>> = pts.iter().chain(&pts).cloned().collect();
        let a = project_2d(&pts).unwrap();
        let b = project_2d(&doubled).unwrap();
        for k in 0..2 {
            for (x, y) in a.components[k].iter().zip(&b.components[k]) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
        }
        for (x, y) in a.points.iter().zip(&b.points[20..]) {
            assert_abs_diff_eq!(x[0], y[0], epsilon = 1e-9);
            assert_abs_diff_eq!(x[1], y[1], epsilon = 1e-9);
        }
        for c in &a.components {
            let lead = c.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn collinear_points_are_flagged() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let p = project_2d(&pts).unwrap();
        assert!(p.rank_deficient);
        assert!(p.points.iter().all(|xy| xy[1] == 0.0));
        assert!(project_2d(&pts[..2]).is_err());
    }
}
