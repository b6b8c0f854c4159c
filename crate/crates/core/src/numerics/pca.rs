use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// How many principal axes to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaTarget {
    Dims(usize),
    /// Smallest number of axes whose explained variance ratio reaches the
    /// given fraction.
    VarianceRatio(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `input dim × retained_dims`, orthonormal columns.
    pub basis: Matrix,
    pub retained_dims: usize,
    pub explained_variance_ratio: f64,
    /// Covariance eigenvalues in descending order (all of them).
    pub eigenvalues: Vec<f64>,
}

/// Fits PCA by eigendecomposition of the sample covariance.
///
/// Axes are sorted by decreasing variance, and each axis is sign-normalized so
/// that its largest-magnitude component is positive. When the data has zero
/// variance the explained ratio is defined as 1.
pub fn pca_fit(x: &Matrix, target: PcaTarget) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if n < 2 || d == 0 {
        return Err(Error::Precondition(format!(
            "PCA needs at least 2 samples and 1 feature, got {n}x{d}"
        )));
    }
    if let PcaTarget::Dims(k) = target {
        if k == 0 || k > n.min(d) {
            return Err(Error::Precondition(format!(
                "retained_dims must be in [1, {}], got {k}",
                n.min(d)
            )));
        }
    }
    if let PcaTarget::VarianceRatio(r) = target {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Precondition(format!(
                "variance ratio target must be in (0, 1], got {r}"
            )));
        }
    }

    let mean = x.column_means();
    let mut centered = x.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = centered.t_matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.as_slice()));

    let mut order: Vec<usize> = (0..d).collect();
    // stable sort keeps the solver's order among exact ties
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0))
        .collect();
    let total: f64 = eigenvalues.iter().sum();

    let ratio_at = |k: usize| -> f64 {
        if total <= 0.0 {
            1.0
        } else {
            (eigenvalues[..k].iter().sum::<f64>() / total).clamp(0.0, 1.0)
        }
    };

    let retained = match target {
        PcaTarget::Dims(k) => k,
        PcaTarget::VarianceRatio(r) => {
            let cap = n.min(d);
            (1..=cap).find(|&k| ratio_at(k) >= r).unwrap_or(cap)
        }
    };

    let basis = Matrix::from_fn(d, retained, |row, col| {
        let v = eig.eigenvectors.column(order[col]);
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        sign * v[row]
    });

    Ok(PcaModel {
        mean,
        basis,
        retained_dims: retained,
        explained_variance_ratio: ratio_at(retained),
        eigenvalues,
    })
}

/// Projects `x` onto the retained axes: `(x - mean) · basis`.
pub fn pca_transform(model: &PcaModel, x: &Matrix) -> Result<Matrix> {
    if x.cols() != model.mean.len() {
        return Err(Error::Shape(format!(
            "PCA model expects {} features, got {}",
            model.mean.len(),
            x.cols()
        )));
    }
    let mut centered = x.clone();
    for i in 0..x.rows() {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&model.mean) {
            *v -= m;
        }
    }
    centered.matmul(&model.basis)
}

/// Maps projected coordinates back to the input space.
pub fn pca_inverse_transform(model: &PcaModel, z: &Matrix) -> Result<Matrix> {
    let mut out = z.matmul_t(&model.basis)?;
    out.add_row_vector(&model.mean)?;
    Ok(out)
}
