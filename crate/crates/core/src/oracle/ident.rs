use super::{OracleError, Result};
use crate::numkit::Matrix;
use nalgebra::{DMatrix, DVector};
use pathfinding::prelude::{kuhn_munkres, Matrix as Weights};
use serde::{Deserialize, Serialize};

/// Least-squares affine map `true ≈ A · learned + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    /// `d_true × d_learned`, row-major.
    pub a: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub r2_per_dim: Vec<f64>,
    /// Mean `|corr|` over the best one-to-one pairing of true and learned
    /// dimensions.
    pub mean_abs_corr: f64,
    /// `assignment[i]` is the learned dimension paired with true dimension
    /// `i` (`None` when there are more true than learned dimensions).
    pub assignment: Vec<Option<usize>>,
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Maximum-weight one-to-one pairing of rows to columns.
fn best_pairing(abs_corr: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = abs_corr.len();
    let cols = abs_corr.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    const SCALE: f64 = 1e12;
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let weights = Weights::from_fn(r, c, |(i, j)| {
        let v = if transpose { abs_corr[j][i] } else { abs_corr[i][j] };
        (v * SCALE).round() as i64
    });
    let (_, assign) = kuhn_munkres(&weights);
    let mut out = vec![None; rows];
    if transpose {
        for (learned, &truth) in assign.iter().enumerate() {
            out[truth] = Some(learned);
        }
    } else {
        for (truth, &learned) in assign.iter().enumerate() {
            out[truth] = Some(learned);
        }
    }
    out
}

/// Fits `truth` (N × d_true) from `learned` (N × d_learned) with an
/// intercept and scores the dimension-wise correlation structure.
pub fn identifiability_score(truth: &Matrix, learned: &Matrix) -> Result<AffineFit> {
    let n = truth.rows();
    if n != learned.rows() || n == 0 {
        return Err(OracleError::Invalid(format!(
            "need equal, non-zero sample counts ({} vs {})",
            truth.rows(),
            learned.rows()
        )));
    }
    let (dt, dl) = (truth.cols(), learned.cols());
    let mut design = DMatrix::from_element(n, dl + 1, 1.0);
    design.view_mut((0, 0), (n, dl)).copy_from(&to_dmatrix(learned));
    let svd = design.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (largest, smallest) = (sv.max(), sv.min());
    if n <= dl || !(smallest > 1e-10 * largest) {
        return Err(OracleError::RankDeficient { smallest });
    }
    let target = to_dmatrix(truth);
    let coef = svd
        .solve(&target, 0.0)
        .map_err(|e| OracleError::Invalid(e.to_string()))?;
    let fitted = &design * &coef;

    let mut r2 = Vec::with_capacity(dt);
    for j in 0..dt {
        let col: DVector<f64> = target.column(j).into_owned();
        let mean = col.mean();
        let ss_tot: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        let ss_res: f64 = col.iter().zip(fitted.column(j).iter()).map(|(v, f)| (v - f) * (v - f)).sum();
        r2.push(if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 });
    }

    let cols_t: Vec<Vec<f64>> = (0..dt).map(|j| (0..n).map(|i| truth.get(i, j)).collect()).collect();
    let cols_l: Vec<Vec<f64>> = (0..dl).map(|j| (0..n).map(|i| learned.get(i, j)).collect()).collect();
    let abs_corr: Vec<Vec<f64>> = cols_t
        .iter()
        .map(|t| cols_l.iter().map(|l| pearson(t, l).abs()).collect())
        .collect();
    let assignment = best_pairing(&abs_corr);
    let paired: Vec<f64> = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|j| abs_corr[i][j]))
        .collect();
    let mean_abs_corr = paired.iter().sum::<f64>() / paired.len().max(1) as f64;

    Ok(AffineFit {
        a: (0..dt).map(|j| (0..dl).map(|i| coef[(i, j)]).collect()).collect(),
        c: (0..dt).map(|j| coef[(dl, j)]).collect(),
        r2_per_dim: r2,
        mean_abs_corr,
        assignment,
    })
}
