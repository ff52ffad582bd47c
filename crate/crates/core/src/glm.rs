//! Logistic and Poisson GLMs fit by iteratively reweighted least squares.
//!
//! Fitting happens on internally z-standardized columns; coefficients and
//! their covariance are mapped back to the caller's scale before returning.
//! Both families use their canonical link, so IRLS coincides with Newton's
//! method and the observed and expected information agree.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

pub const INTERCEPT: &str = "(Intercept)";

const MAX_ITERATIONS: usize = 100;
const MAX_HALVINGS: usize = 10;
const DEVIANCE_TOLERANCE: f64 = 1e-8;
const SCORE_TOLERANCE: f64 = 1e-6;
const SEPARATION_THRESHOLD: f64 = 15.0;
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("perfect or quasi-complete separation detected (standardized |coefficient| > {SEPARATION_THRESHOLD} or vanishing deviance)")]
    Separation,
    #[error("information matrix is singular: {0}")]
    Singular(String),
    #[error("IRLS did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("all counts are zero")]
    AllZeroCounts,
    #[error("column mismatch: {0}")]
    ColumnMismatch(String),
    #[error("model family {0:?} cannot be used here")]
    WrongFamily(Family),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Logistic,
    Poisson,
}

/// Model matrix whose first column is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    names: Vec<String>,
    values: DMatrix<f64>,
}

impl DesignMatrix {
    /// Prepends an intercept to the named predictor columns.
    pub fn from_columns(columns: Vec<(String, Vec<f64>)>) -> Result<Self, GlmError> {
        let n = match columns.first() {
            Some((_, c)) => c.len(),
            None => return Err(GlmError::InvalidDesign("no predictors given".into())),
        };
        Self::with_rows(n, columns)
    }

    /// Intercept-only design when `columns` is empty.
    pub fn with_rows(n: usize, columns: Vec<(String, Vec<f64>)>) -> Result<Self, GlmError> {
        let p = columns.len() + 1;
        let mut values = DMatrix::from_element(n, p, 1.0);
        let mut names = Vec::with_capacity(p);
        names.push(INTERCEPT.to_string());
        for (j, (name, col)) in columns.into_iter().enumerate() {
            if col.len() != n {
                return Err(GlmError::InvalidDesign(format!(
                    "column `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
            values.column_mut(j + 1).copy_from_slice(&col);
            names.push(name);
        }
        Self::new(names, values)
    }

    pub fn new(names: Vec<String>, values: DMatrix<f64>) -> Result<Self, GlmError> {
        if names.len() != values.ncols() {
            return Err(GlmError::InvalidDesign("name count differs from column count".into()));
        }
        if names.first().map(String::as_str) != Some(INTERCEPT)
            || values.column(0).iter().any(|&v| v != 1.0)
        {
            return Err(GlmError::InvalidDesign("first column must be a constant-1 intercept".into()));
        }
        let mut sorted = names.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(GlmError::InvalidDesign("duplicate column names".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GlmError::InvalidDesign("non-finite entry".into()));
        }
        Ok(DesignMatrix { names, values })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Per-column `(mean, scale)`; the intercept maps to `(0, 1)`.
    pub fn standardization(&self) -> Vec<(f64, f64)> {
        let n = self.nrows() as f64;
        self.values
            .column_iter()
            .enumerate()
            .map(|(j, col)| {
                if j == 0 {
                    return (0.0, 1.0);
                }
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .collect()
    }
}

/// Serializable snapshot of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub family: Family,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_abs_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedGlm {
    pub family: Family,
    pub names: Vec<String>,
    /// Original (unstandardized) scale.
    pub coefficients: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest |score| component at the returned estimate, standardized coordinates.
    pub max_abs_score: f64,
    pub standardization: Vec<(f64, f64)>,
    /// Deviance at the start value and after every accepted step.
    pub deviance_trace: Vec<f64>,
}

impl FittedGlm {
    fn position(&self, name: &str) -> Result<usize, GlmError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| GlmError::ColumnMismatch(format!("no coefficient named `{name}`")))
    }

    pub fn coefficient(&self, name: &str) -> Result<f64, GlmError> {
        Ok(self.coefficients[self.position(name)?])
    }

    pub fn std_error(&self, name: &str) -> Result<f64, GlmError> {
        let i = self.position(name)?;
        Ok(self.covariance[(i, i)].max(0.0).sqrt())
    }

    pub fn record(&self) -> ModelRecord {
        let p = self.names.len();
        ModelRecord {
            family: self.family,
            names: self.names.clone(),
            coefficients: self.coefficients.iter().copied().collect(),
            std_errors: (0..p).map(|i| self.covariance[(i, i)].max(0.0).sqrt()).collect(),
            covariance: (0..p)
                .map(|i| (0..p).map(|j| self.covariance[(i, j)]).collect())
                .collect(),
            deviance: self.deviance,
            iterations: self.iterations,
            converged: self.converged,
            max_abs_score: self.max_abs_score,
        }
    }

    pub fn linear_predictor(&self, x: &DesignMatrix) -> Result<DVector<f64>, GlmError> {
        if x.names() != self.names.as_slice() {
            return Err(GlmError::ColumnMismatch(
                "design columns differ from the fitted model's".into(),
            ));
        }
        Ok(x.values() * &self.coefficients)
    }
}

fn inv_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Family {
    fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Logistic => inv_logit(eta),
            Family::Poisson => eta.exp(),
        }
    }

    /// IRLS working weight, equal to the variance function for canonical links.
    fn weight(self, mu: f64) -> f64 {
        match self {
            Family::Logistic => mu * (1.0 - mu),
            Family::Poisson => mu,
        }
    }

    fn unit_deviance(self, y: f64, eta: f64, mu: f64) -> f64 {
        match self {
            // -2 log-likelihood of a Bernoulli outcome; the saturated model has ll = 0.
            Family::Logistic => 2.0 * (softplus(eta) - y * eta),
            Family::Poisson => {
                let ylog = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                2.0 * (ylog - (y - mu))
            }
        }
    }
}

struct Evaluation {
    mu: DVector<f64>,
    deviance: f64,
}

fn evaluate(family: Family, z: &DMatrix<f64>, y: &DVector<f64>, offset: &DVector<f64>, gamma: &DVector<f64>) -> Evaluation {
    let eta = z * gamma + offset;
    let mu = eta.map(|e| family.mean(e));
    let deviance = (0..y.len())
        .map(|i| family.unit_deviance(y[i], eta[i], mu[i]))
        .sum();
    Evaluation { mu, deviance }
}

/// Column (center, scale) pairs; the intercept keeps (0, 1).
type Standardization = Vec<(f64, f64)>;

fn standardize(x: &DesignMatrix) -> Result<(DMatrix<f64>, Standardization), GlmError> {
    let std = x.standardization();
    let mut z = x.values().clone();
    for (j, &(mean, scale)) in std.iter().enumerate().skip(1) {
        if !(scale > 0.0) {
            return Err(GlmError::Singular(format!(
                "column `{}` is constant (collinear with the intercept)",
                x.names()[j]
            )));
        }
        z.column_mut(j).apply(|v| *v = (*v - mean) / scale);
    }
    Ok((z, std))
}

fn check_rank(z: &DMatrix<f64>) -> Result<(), GlmError> {
    let gram = z.tr_mul(z) / z.nrows() as f64;
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if !(min > RANK_TOLERANCE * max) {
        return Err(GlmError::Singular("design matrix is rank deficient".into()));
    }
    Ok(())
}

/// Maps standardized coefficients to the original column scale: `beta = T gamma`.
fn back_transform(std: &[(f64, f64)]) -> DMatrix<f64> {
    let p = std.len();
    let mut t = DMatrix::zeros(p, p);
    t[(0, 0)] = 1.0;
    for (j, &(mean, scale)) in std.iter().enumerate().skip(1) {
        t[(j, j)] = 1.0 / scale;
        t[(0, j)] = -mean / scale;
    }
    t
}

fn weighted_gram(z: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut zw = z.clone();
    for (i, mut row) in zw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    z.tr_mul(&zw)
}

fn irls(family: Family, x: &DesignMatrix, y: &DVector<f64>, offset: &DVector<f64>) -> Result<FittedGlm, GlmError> {
    let (n, p) = (x.nrows(), x.ncols());
    if n < p {
        return Err(GlmError::InvalidDesign(format!("need at least as many rows ({n}) as columns ({p})")));
    }
    let (z, std) = standardize(x)?;
    check_rank(&z)?;

    let mut gamma = DVector::zeros(p);
    gamma[0] = match family {
        Family::Logistic => {
            let ybar = y.mean();
            (ybar / (1.0 - ybar)).ln()
        }
        Family::Poisson => (y.sum() / offset.map(f64::exp).sum()).ln(),
    };
    let mut state = evaluate(family, &z, y, offset, &gamma);
    let mut trace = vec![state.deviance];
    let mut rel_change = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut score = z.tr_mul(&(y - &state.mu));

    while iterations < MAX_ITERATIONS {
        let max_score = score.amax();
        if rel_change < DEVIANCE_TOLERANCE && max_score < SCORE_TOLERANCE {
            converged = true;
            break;
        }
        iterations += 1;
        let info = weighted_gram(&z, &state.mu.map(|m| family.weight(m)));
        let chol = Cholesky::new(info)
            .ok_or_else(|| GlmError::Singular("information matrix is not positive definite".into()))?;
        let delta = chol.solve(&score);

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &gamma + &delta * step;
            let eval = evaluate(family, &z, y, offset, &candidate);
            // Allow round-off-sized increases once the optimum is reached.
            let slack = 1e-12 * (state.deviance.abs() + 1.0);
            if eval.deviance.is_finite() && eval.deviance <= state.deviance + slack {
                accepted = Some((candidate, eval));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, eval)) = accepted else {
            if max_score < SCORE_TOLERANCE {
                converged = true;
                break;
            }
            return Err(GlmError::NoConvergence(iterations));
        };

        rel_change = (state.deviance - eval.deviance).abs() / (eval.deviance.abs() + 0.1);
        gamma = candidate;
        state = eval;
        trace.push(state.deviance);
        score = z.tr_mul(&(y - &state.mu));

        let separated = gamma.iter().skip(1).any(|g| g.abs() > SEPARATION_THRESHOLD)
            || (family == Family::Logistic && state.deviance < 1e-8);
        if separated && !(rel_change < DEVIANCE_TOLERANCE && score.amax() < SCORE_TOLERANCE) {
            return Err(GlmError::Separation);
        }
    }
    if !converged {
        if rel_change < DEVIANCE_TOLERANCE && score.amax() < SCORE_TOLERANCE {
            converged = true;
        } else {
            return Err(GlmError::NoConvergence(iterations));
        }
    }

    let info = weighted_gram(&z, &state.mu.map(|m| family.weight(m)));
    let cov_std = info
        .try_inverse()
        .ok_or_else(|| GlmError::Singular("information matrix is not invertible".into()))?;
    let t = back_transform(&std);
    let coefficients = &t * &gamma;
    let cov = &t * cov_std * t.transpose();
    let covariance = (&cov + cov.transpose()) * 0.5;

    Ok(FittedGlm {
        family,
        names: x.names().to_vec(),
        coefficients,
        covariance,
        deviance: state.deviance,
        iterations,
        converged,
        max_abs_score: score.amax(),
        standardization: std,
        deviance_trace: trace,
    })
}

/// Logistic regression of a binary outcome on `x`.
pub fn fit_logistic(x: &DesignMatrix, y: &[bool]) -> Result<FittedGlm, GlmError> {
    if y.len() != x.nrows() {
        return Err(GlmError::InvalidResponse(format!(
            "{} responses for {} rows",
            y.len(),
            x.nrows()
        )));
    }
    let ones = y.iter().filter(|&&v| v).count();
    if ones == 0 || ones == y.len() {
        return Err(GlmError::InvalidResponse("response has a single class".into()));
    }
    let yv = DVector::from_iterator(y.len(), y.iter().map(|&v| if v { 1.0 } else { 0.0 }));
    irls(Family::Logistic, x, &yv, &DVector::zeros(y.len()))
}

/// Poisson regression of `counts` with a fixed `offset` (log person-time).
pub fn fit_poisson(x: &DesignMatrix, counts: &[u64], offset: &[f64]) -> Result<FittedGlm, GlmError> {
    if counts.len() != x.nrows() || offset.len() != x.nrows() {
        return Err(GlmError::InvalidResponse("counts/offset length differs from design rows".into()));
    }
    if offset.iter().any(|o| !o.is_finite()) {
        return Err(GlmError::InvalidResponse("non-finite offset".into()));
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(GlmError::AllZeroCounts);
    }
    let y = DVector::from_iterator(counts.len(), counts.iter().map(|&c| c as f64));
    irls(Family::Poisson, x, &y, &DVector::from_column_slice(offset))
}

/// Fitted probabilities of a logistic model at `x`.
pub fn predict_proba(model: &FittedGlm, x: &DesignMatrix) -> Result<Vec<f64>, GlmError> {
    if model.family != Family::Logistic {
        return Err(GlmError::WrongFamily(model.family));
    }
    Ok(model.linear_predictor(x)?.iter().map(|&e| inv_logit(e)).collect())
}

/// Log-likelihood up to terms constant in `beta`.
pub fn log_likelihood(family: Family, x: &DesignMatrix, y: &[f64], offset: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x.values() * beta + DVector::from_column_slice(offset);
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| match family {
            Family::Logistic => yi * e - softplus(e),
            Family::Poisson => yi * e - e.exp(),
        })
        .sum()
}

/// Analytic gradient of the log-likelihood with respect to `beta`, `X'(y - mu)`.
pub fn score(family: Family, x: &DesignMatrix, y: &[f64], offset: &[f64], beta: &DVector<f64>) -> DVector<f64> {
    let eta = x.values() * beta + DVector::from_column_slice(offset);
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y).map(|(&e, &yi)| yi - family.mean(e)));
    x.values().tr_mul(&resid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrrEstimate {
    pub log_irr: f64,
    pub log_se: f64,
    pub irr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

/// Two-sided normal quantile for a confidence `level`.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + level / 2.0)
}

/// Rate ratio for `column` with a Wald interval on the log scale.
pub fn irr_with_ci(model: &FittedGlm, column: &str, level: f64) -> Result<IrrEstimate, GlmError> {
    if model.family != Family::Poisson {
        return Err(GlmError::WrongFamily(model.family));
    }
    let beta = model.coefficient(column)?;
    let se = model.std_error(column)?;
    Ok(irr_from_log(beta, se, level))
}

pub fn irr_from_log(log_irr: f64, log_se: f64, level: f64) -> IrrEstimate {
    let z = normal_quantile(level);
    IrrEstimate {
        log_irr,
        log_se,
        irr: log_irr.exp(),
        ci_low: (log_irr - z * log_se).exp(),
        ci_high: (log_irr + z * log_se).exp(),
        level,
    }
}
