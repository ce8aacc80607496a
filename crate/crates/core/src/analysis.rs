//! Latent-space diagnostics: per-video PCA spectra and a silhouette-style
//! separation score between one video's codes and the rest.

pub use nalgebra::DMatrix;
use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PCA spectrum of one video's latent codes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumEntry {
    pub id: String,
    /// Descending, nonnegative.
    pub eigenvalues: Vec<f64>,
    /// Cumulative explained-variance ratios; last entry is 1.
    pub cumulative: Vec<f64>,
    /// Fewest components whose cumulative ratio reaches the target.
    pub k_star: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub target: f64,
    pub entries: Vec<SpectrumEntry>,
    /// Component-wise mean of the cumulative curves.
    pub mean_curve: Vec<f64>,
}

/// Rows of a `[N, Z]` code tensor as an `N × Z` matrix.
pub fn codes_matrix(codes: &Tensor<f32>) -> Result<DMatrix<f64>> {
    let (n, z) = codes.dims2("codes_matrix")?;
    Ok(DMatrix::from_fn(n, z, |r, c| codes.data()[r * z + c] as f64))
}

/// Sample covariance (`1/(N−1)`) of the rows of `x`.
pub fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c.transpose() * &c / (n as f64 - 1.0)
}

pub fn pca_video_variance(id: &str, latents: &DMatrix<f64>, target_ratio: f64) -> Result<SpectrumEntry> {
    if latents.nrows() < 2 {
        return Err(Error::invalid(
            "pca_video_variance",
            format!("need at least 2 codes, got {}", latents.nrows()),
        ));
    }
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        return Err(Error::invalid(
            "pca_video_variance",
            format!("target ratio {target_ratio} outside (0, 1]"),
        ));
    }
    let cov = covariance(latents);
    let eig = SymmetricEigen::new(cov);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = vals.iter().sum();
    let cumulative: Vec<f64> = if total > 0.0 {
        let mut acc = 0.0;
        vals.iter()
            .map(|v| {
                acc += v;
                (acc / total).min(1.0)
            })
            .collect()
    } else {
        vec![1.0; vals.len()]
    };
    let k_star = cumulative
        .iter()
        .position(|&c| c >= target_ratio - 1e-12)
        .map_or(cumulative.len(), |i| i + 1);
    Ok(SpectrumEntry {
        id: id.to_string(),
        eigenvalues: vals,
        cumulative,
        k_star,
    })
}

pub fn spectrum_report(entries: Vec<SpectrumEntry>, target: f64) -> Result<SpectrumReport> {
    let Some(first) = entries.first() else {
        return Err(Error::invalid("spectrum_report", "no videos"));
    };
    let z = first.cumulative.len();
    if let Some(e) = entries.iter().find(|e| e.cumulative.len() != z) {
        return Err(Error::Boundary {
            boundary: "spectrum latent dimension",
            expected: z,
            got: e.cumulative.len(),
        });
    }
    let mean_curve = (0..z)
        .map(|k| entries.iter().map(|e| e.cumulative[k]).sum::<f64>() / entries.len() as f64)
        .collect();
    Ok(SpectrumReport {
        target,
        entries,
        mean_curve,
    })
}

fn dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (a.row(i) - b.row(j)).norm()
}

/// Mean silhouette of the points of `a` against the two-cluster partition
/// `{a, b}`: per point, `(b_i − a_i) / max(a_i, b_i)` where `a_i` is the
/// mean distance to the other points of `a` and `b_i` the mean distance to
/// the points of `b`. With a single other cluster, the nearest other
/// cluster is `b` itself. Points with `max = 0` contribute 0.
pub fn cluster_separation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::invalid("cluster_separation", "each set needs at least 2 codes"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Boundary {
            boundary: "cluster_separation code dimension",
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    let (n, m) = (a.nrows(), b.nrows());
    let mut total = 0.0;
    for i in 0..n {
        let intra = (0..n).filter(|&j| j != i).map(|j| dist(a, i, a, j)).sum::<f64>() / (n - 1) as f64;
        let inter = (0..m).map(|j| dist(a, i, b, j)).sum::<f64>() / m as f64;
        let den = intra.max(inter);
        if den > 0.0 {
            total += (inter - intra) / den;
        }
    }
    Ok(total / n as f64)
}
