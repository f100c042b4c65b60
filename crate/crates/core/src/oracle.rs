//! Closed-form posterior mean `E[x0 | x_t]` for Gaussian data.
//!
//! For `x0 ~ N(mu, Sigma)` the posterior mean is
//! `mu + alpha Sigma (alpha^2 Sigma + sigma^2 I)^-1 (x_t - alpha mu)`,
//! which makes it the exact optimal x0-predictor at every `t`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::param::{from_x0_coeffs, PredKind, Prediction};
use crate::sampler::Predictor;
use crate::schedule::Schedule;

const MAX_COND: f64 = 1e12;
const MAX_DENSE_DIM: usize = 64;

#[derive(Clone, Debug)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

#[derive(Clone, Debug)]
pub struct GaussianData {
    mean: Vec<f64>,
    cov: Covariance,
}

impl GaussianData {
    pub fn diagonal(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::ShapeMismatch {
                expected: mean.len(),
                got: var.len(),
            });
        }
        if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("covariance eigenvalues must be positive".into()));
        }
        Ok(GaussianData {
            mean,
            cov: Covariance::Diagonal(var),
        })
    }

    pub fn dense(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::ShapeMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        if d > MAX_DENSE_DIM {
            return Err(Error::Config(format!(
                "dense covariance limited to d <= {MAX_DENSE_DIM}"
            )));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 {
            return Err(Error::Config("covariance must be symmetric".into()));
        }
        let eig = cov.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|l| *l <= 0.0) {
            return Err(Error::Config("covariance eigenvalues must be positive".into()));
        }
        Ok(GaussianData {
            mean,
            cov: Covariance::Dense(cov),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    /// Marginal variance of each coordinate.
    pub fn variances(&self) -> Vec<f64> {
        match &self.cov {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Dense(m) => m.diagonal().iter().copied().collect(),
        }
    }

    pub fn posterior_mean(&self, x_t: &[f64], t: f64, s: &Schedule) -> Result<Prediction> {
        let value = self.posterior_mean_values(x_t, t, s)?;
        Prediction::new(PredKind::X0, value, t, x_t.to_vec())
    }

    fn posterior_mean_values(&self, x_t: &[f64], t: f64, s: &Schedule) -> Result<Vec<f64>> {
        if x_t.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.dim(),
                got: x_t.len(),
            });
        }
        s.check_time(t)?;
        let (a, sg) = (s.alpha(t), s.sigma(t));
        let s2 = sg * sg;
        match &self.cov {
            Covariance::Diagonal(var) => {
                let denom: Vec<f64> = var.iter().map(|v| a * a * v + s2).collect();
                let (lo, hi) = denom
                    .iter()
                    .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
                let cond = hi / lo;
                if !(cond <= MAX_COND) {
                    return Err(Error::IllConditioned { cond });
                }
                Ok((0..self.dim())
                    .map(|i| {
                        let mu = self.mean[i];
                        mu + a * var[i] / denom[i] * (x_t[i] - a * mu)
                    })
                    .collect())
            }
            Covariance::Dense(cov) => {
                let d = self.dim();
                let m = cov * (a * a) + DMatrix::identity(d, d) * s2;
                let eig = m.clone().symmetric_eigen();
                let (lo, hi) = eig
                    .eigenvalues
                    .iter()
                    .fold((f64::INFINITY, 0.0f64), |(lo, hi), l| (lo.min(*l), hi.max(*l)));
                let cond = hi / lo;
                if !(lo > 0.0 && cond <= MAX_COND) {
                    return Err(Error::IllConditioned { cond });
                }
                let chol = m.cholesky().ok_or(Error::IllConditioned { cond })?;
                let mu = DVector::from_column_slice(&self.mean);
                let r = DVector::from_column_slice(x_t) - &mu * a;
                let out = &mu + cov * chol.solve(&r) * a;
                Ok(out.iter().copied().collect())
            }
        }
    }
}

/// The Gaussian posterior mean exposed as a predictor of any kind.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub data: GaussianData,
    pub schedule: Schedule,
    pub expose: PredKind,
}

impl GaussianOracle {
    pub fn new(data: GaussianData, schedule: Schedule, expose: PredKind) -> Result<Self> {
        if !expose.valid_on(&schedule) {
            return Err(Error::VpRequired);
        }
        Ok(GaussianOracle {
            data,
            schedule,
            expose,
        })
    }
}

impl Predictor for GaussianOracle {
    fn kind(&self) -> PredKind {
        self.expose
    }

    fn predict(
        &self,
        states: ArrayView2<'_, f64>,
        t: f64,
        _controls: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        let coeff = from_x0_coeffs(self.expose, &self.schedule, t)?;
        let mut out = Array2::zeros(states.raw_dim());
        for (row, mut dst) in states.outer_iter().zip(out.outer_iter_mut()) {
            let x: Vec<f64> = row.to_vec();
            let x0 = self.data.posterior_mean_values(&x, t, &self.schedule)?;
            for j in 0..x.len() {
                dst[j] = coeff.apply(x0[j], x[j]);
            }
        }
        Ok(out)
    }
}
