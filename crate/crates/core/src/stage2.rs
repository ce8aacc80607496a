//! Stage II: a linear map `A` that advances a latent code by one step,
//! `d' ≈ A·[d; 1]`, fitted in closed form by ridge regression.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io::{Checkpoint, ModelKind};
use crate::kv::{KvDoc, KvWriter};
use crate::tensor::Tensor;

/// Provenance of one latent pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairMeta {
    pub sequence: String,
    pub gap: usize,
}

/// Design matrices: column `k` of `x` is `[d_k; 1]`, column `k` of `y` is
/// the code `gap_k` steps later.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPairSet {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub meta: Vec<PairMeta>,
}

impl LatentPairSet {
    pub fn latent_dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The pair stored in column `k`, without the homogeneous 1.
    pub fn pair(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let z = self.latent_dim();
        (
            self.x.column(k).rows(0, z).iter().copied().collect(),
            self.y.column(k).iter().copied().collect(),
        )
    }

    /// Columns selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> LatentPairSet {
        LatentPairSet {
            x: self.x.select_columns(idx),
            y: self.y.select_columns(idx),
            meta: idx.iter().map(|&i| self.meta[i].clone()).collect(),
        }
    }
}

pub fn build_design_matrices(pairs: &[(Vec<f64>, Vec<f64>)], meta: Vec<PairMeta>) -> Result<LatentPairSet> {
    let Some(first) = pairs.first() else {
        return Err(Error::invalid("build_design_matrices", "no pairs"));
    };
    if meta.len() != pairs.len() {
        return Err(Error::Boundary {
            boundary: "pair metadata",
            expected: pairs.len(),
            got: meta.len(),
        });
    }
    let z = first.0.len();
    if z == 0 {
        return Err(Error::invalid("build_design_matrices", "zero-dimensional codes"));
    }
    for (a, b) in pairs {
        for v in [a, b] {
            if v.len() != z {
                return Err(Error::Boundary {
                    boundary: "latent pair dimension",
                    expected: z,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("build_design_matrices", "non-finite latent code"));
            }
        }
    }
    let n = pairs.len();
    let x = DMatrix::from_fn(z + 1, n, |r, c| if r < z { pairs[c].0[r] } else { 1.0 });
    let y = DMatrix::from_fn(z, n, |r, c| pairs[c].1[r]);
    Ok(LatentPairSet { x, y, meta })
}

/// Pairs from row-aligned code tensors `[N, Z]`.
pub fn pairs_from_tensors(first: &Tensor<f32>, second: &Tensor<f32>, meta: Vec<PairMeta>) -> Result<LatentPairSet> {
    let (n, z) = first.dims2("latent pairs")?;
    second.expect_shape("latent pairs", &[n, z])?;
    let row = |t: &Tensor<f32>, i: usize| t.data()[i * z..(i + 1) * z].iter().map(|&v| v as f64).collect();
    let pairs: Vec<_> = (0..n).map(|i| (row(first, i), row(second, i))).collect();
    build_design_matrices(&pairs, meta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearDynamicsModel {
    /// `Z × (Z+1)`; the last column is the constant term.
    pub a: DMatrix<f64>,
    /// Absolute regularization weight used in the fit.
    pub lambda: f64,
}

impl LinearDynamicsModel {
    pub fn identity(z: usize) -> Self {
        let mut a = DMatrix::zeros(z, z + 1);
        a.view_mut((0, 0), (z, z)).fill_with_identity();
        LinearDynamicsModel { a, lambda: 0.0 }
    }

    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn linear_part(&self) -> DMatrix<f64> {
        let z = self.latent_dim();
        self.a.columns(0, z).into_owned()
    }

    pub fn constant_part(&self) -> DVector<f64> {
        self.a.column(self.latent_dim()).into_owned()
    }

    /// `A·[d; 1]`.
    pub fn predict(&self, d: &[f64]) -> Result<Vec<f64>> {
        let z = self.latent_dim();
        if d.len() != z {
            return Err(Error::Boundary {
                boundary: "predict_latent input",
                expected: z,
                got: d.len(),
            });
        }
        let x = DVector::from_iterator(z + 1, d.iter().copied().chain(std::iter::once(1.0)));
        Ok((&self.a * x).iter().copied().collect())
    }

    /// Row-wise prediction on `[N, Z]` codes, computed in f64.
    pub fn predict_batch(&self, codes: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (n, z) = codes.dims2("predict_latent")?;
        if z != self.latent_dim() {
            return Err(Error::Boundary {
                boundary: "predict_latent input",
                expected: self.latent_dim(),
                got: z,
            });
        }
        let mut out = Vec::with_capacity(n * z);
        for i in 0..n {
            let d: Vec<f64> = codes.data()[i * z..(i + 1) * z].iter().map(|&v| v as f64).collect();
            out.extend(self.predict(&d)?.into_iter().map(|v| v as f32));
        }
        Tensor::new(&[n, z], out)
    }

    /// `(weight [Z, Z], bias [Z])` for use as a fully connected layer.
    pub fn as_linear_layer(&self) -> (Tensor<f32>, Tensor<f32>) {
        let z = self.latent_dim();
        let w = Tensor::from_fn(&[z, z], |i| self.a[(i / z, i % z)] as f32);
        let b = Tensor::from_fn(&[z], |i| self.a[(i, z)] as f32);
        (w, b)
    }

    pub fn to_checkpoint(&self, spec_echo: String, extra_meta: &str) -> Checkpoint {
        let z = self.latent_dim();
        let meta = KvWriter::default().section("stage2").kv("lambda", self.lambda).finish() + extra_meta;
        let mut c = Checkpoint::new(ModelKind::Dynamics, spec_echo, meta);
        c.push("A", Tensor::from_fn(&[z, z + 1], |i| self.a[(i / (z + 1), i % (z + 1))] as f32));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ModelKind::Dynamics)?;
        let t = c
            .tensor("A")
            .ok_or_else(|| crate::io::FormatError::Malformed("dynamics checkpoint lacks `A`".into()))?;
        let (z, z1) = t.dims2("dynamics checkpoint")?;
        if z1 != z + 1 {
            return Err(Error::shape("dynamics checkpoint", &[z, z + 1], t.shape()));
        }
        let doc = KvDoc::parse(&c.meta)?;
        let lambda = doc.reader("stage2").get("lambda", 0.0)?;
        Ok(LinearDynamicsModel {
            a: DMatrix::from_fn(z, z1, |r, col| t.data()[r * z1 + col] as f64),
            lambda,
        })
    }
}

/// Closed-form ridge solution `A = Y·Xᵀ·(X·Xᵀ + λI)⁻¹`, via a Cholesky
/// solve of `(X·Xᵀ + λI)·Aᵀ = X·Yᵀ`.
pub fn fit_ridge(set: &LatentPairSet, lambda: f64) -> Result<LinearDynamicsModel> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(
            "fit_ridge",
            format!("lambda_ii must be finite and >= 0, got {lambda}"),
        ));
    }
    let z1 = set.x.nrows();
    let mut gram = &set.x * set.x.transpose();
    for i in 0..z1 {
        gram[(i, i)] += lambda;
    }
    let rhs = &set.x * set.y.transpose();
    let chol = gram.clone().cholesky().ok_or(Error::Singular)?;
    let l_diag = chol.l_dirty().diagonal();
    let (lo, hi) = l_diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    // a pivot this small relative to the largest means the Gram matrix is
    // singular to working precision
    if !(lo > hi * 1e-7) {
        return Err(Error::Singular);
    }
    let at = chol.solve(&rhs);
    let resid = (&gram * &at - &rhs).norm();
    if !(resid <= 1e-8 * rhs.norm().max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular);
    }
    Ok(LinearDynamicsModel { a: at.transpose(), lambda })
}

/// `‖Y − A·X‖²_F + λ‖A‖²_F` with the model's own λ.
pub fn ridge_objective(model: &LinearDynamicsModel, set: &LatentPairSet) -> f64 {
    let r = &set.y - &model.a * &set.x;
    r.norm_squared() + model.lambda * model.a.norm_squared()
}

/// Gradient of [`ridge_objective`] with respect to `A`.
pub fn ridge_gradient(model: &LinearDynamicsModel, set: &LatentPairSet) -> DMatrix<f64> {
    (&model.a * &set.x - &set.y) * set.x.transpose() * 2.0 + &model.a * (2.0 * model.lambda)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RidgeOptions {
    /// Regularization relative to `trace(X·Xᵀ)/(Z+1)`.
    pub lambda_rel: f64,
    /// Z-score each latent dimension before fitting.
    pub standardize: bool,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        RidgeOptions {
            lambda_rel: 1e-3,
            standardize: false,
        }
    }
}

fn relative_lambda(set: &LatentPairSet, lambda_rel: f64) -> f64 {
    let tr: f64 = set.x.row_iter().map(|r| r.norm_squared()).sum();
    lambda_rel * tr / set.x.nrows() as f64
}

/// Ridge fit with relative λ and optional standardization. With
/// standardization the fit happens in z-scored coordinates and is mapped
/// back, so the returned `A` always acts on raw codes.
pub fn fit_dynamics(set: &LatentPairSet, opts: RidgeOptions) -> Result<LinearDynamicsModel> {
    if !opts.standardize {
        return fit_ridge(set, relative_lambda(set, opts.lambda_rel));
    }
    let z = set.latent_dim();
    let n = set.len() as f64;
    let xs = set.x.rows(0, z);
    let mu: DVector<f64> = xs.column_mean();
    let sd = DVector::from_fn(z, |i, _| {
        let v = xs.row(i).iter().map(|x| (x - mu[i]).powi(2)).sum::<f64>() / n;
        if v > 0.0 {
            v.sqrt()
        } else {
            1.0
        }
    });
    let norm = |m: &DMatrix<f64>| DMatrix::from_fn(z, m.ncols(), |r, c| (m[(r, c)] - mu[r]) / sd[r]);
    let mut xt = norm(&set.x.rows(0, z).into_owned()).insert_row(z, 1.0);
    xt.row_mut(z).fill(1.0);
    let scaled = LatentPairSet {
        x: xt,
        y: norm(&set.y),
        meta: set.meta.clone(),
    };
    let fit = fit_ridge(&scaled, relative_lambda(&scaled, opts.lambda_rel))?;
    let lin_t = fit.linear_part();
    let c_t = fit.constant_part();
    // y = μ + S·Ã·S⁻¹(x − μ) + S·c̃
    let lin = DMatrix::from_fn(z, z, |r, c| sd[r] * lin_t[(r, c)] / sd[c]);
    let c = &mu + sd.component_mul(&c_t) - &lin * &mu;
    let mut a = lin.insert_column(z, 0.0);
    a.set_column(z, &c);
    Ok(LinearDynamicsModel { a, lambda: fit.lambda })
}

/// Mean squared prediction error of `model` and of the copy-the-code
/// baseline, averaged over pairs and dimensions.
pub fn prediction_mse(model: &LinearDynamicsModel, set: &LatentPairSet) -> (f64, f64) {
    let z = set.latent_dim();
    let denom = (set.len() * z) as f64;
    let pred = (&set.y - &model.a * &set.x).norm_squared() / denom;
    let ident = (&set.y - set.x.rows(0, z)).norm_squared() / denom;
    (pred, ident)
}
