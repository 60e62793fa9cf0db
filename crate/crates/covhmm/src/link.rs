//! Multinomial-logit links from patient covariates to state distributions,
//! plus the weighted maximum-likelihood fitter used by the EM M-step.
//!
//! Category 0 is the base category and carries no parameters: a block for K
//! categories over D covariates stores K-1 intercepts and a (K-1)xD
//! coefficient matrix. Probabilities come out of a max-subtracted softmax so
//! saturated logits never overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{StateDistribution, TransitionMatrix};

/// Number of comorbidity flags carried per patient.
pub const N_FLAGS: usize = 8;

/// Covariates entering the initial-state model, in order.
pub const INIT_COVARIATE_NAMES: [&str; 11] = [
    "age",
    "gender",
    "surgery_hours",
    "tumor",
    "htn",
    "arrhythmia",
    "fluid_electrolyte",
    "valvular",
    "liver",
    "pulmonary",
    "diabetes",
];

/// Covariates entering every transition-row model, in order.
pub const TRANS_COVARIATE_NAMES: [&str; 3] = ["age", "gender", "surgery_hours"];

/// A patient's time-invariant covariates.
///
/// Flags, in order: solid tumor without metastasis, uncomplicated
/// hypertension, arrhythmia, fluid and electrolyte disorder, valvular
/// disease, liver disease, chronic pulmonary disease, uncomplicated diabetes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateVector {
    pub age: f64,
    pub gender: u8,
    pub surgery_hours: f64,
    pub tumor: u8,
    pub htn: u8,
    pub arrhythmia: u8,
    pub fluid_electrolyte: u8,
    pub valvular: u8,
    pub liver: u8,
    pub pulmonary: u8,
    pub diabetes: u8,
}

impl CovariateVector {
    pub fn new(age: f64, gender: u8, surgery_hours: f64, flags: [u8; N_FLAGS]) -> Result<Self> {
        let cv = Self {
            age,
            gender,
            surgery_hours,
            tumor: flags[0],
            htn: flags[1],
            arrhythmia: flags[2],
            fluid_electrolyte: flags[3],
            valvular: flags[4],
            liver: flags[5],
            pulmonary: flags[6],
            diabetes: flags[7],
        };
        cv.validate()?;
        Ok(cv)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.age.is_finite() || self.age < 0.0 {
            return Err(Error::InvalidParameter(format!("age {}", self.age)));
        }
        if !self.surgery_hours.is_finite() || self.surgery_hours < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "surgery_hours {}",
                self.surgery_hours
            )));
        }
        for (name, v) in [("gender", self.gender)].into_iter().chain(
            INIT_COVARIATE_NAMES[3..]
                .iter()
                .copied()
                .zip(self.flags())
                .map(|(n, f)| (n, f)),
        ) {
            if v > 1 {
                return Err(Error::InvalidParameter(format!("{name} flag {v} not in {{0,1}}")));
            }
        }
        Ok(())
    }

    fn flags(&self) -> [u8; N_FLAGS] {
        [
            self.tumor,
            self.htn,
            self.arrhythmia,
            self.fluid_electrolyte,
            self.valvular,
            self.liver,
            self.pulmonary,
            self.diabetes,
        ]
    }

    /// The 11 predictors of the initial-state model:
    /// age, gender, surgery hours, then the 8 comorbidity flags.
    pub fn init_covariates(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(INIT_COVARIATE_NAMES.len());
        z.push(self.age);
        z.push(self.gender as f64);
        z.push(self.surgery_hours);
        z.extend(self.flags().iter().map(|&f| f as f64));
        z
    }

    /// The 3 predictors shared by all transition rows: age, gender,
    /// surgery hours (a prefix of [`init_covariates`](Self::init_covariates)).
    pub fn trans_covariates(&self) -> Vec<f64> {
        vec![self.age, self.gender as f64, self.surgery_hours]
    }
}

/// Parameters of one multinomial-logit model: intercepts and coefficients
/// for categories 1..K (category 0 is the all-zero base).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitBlock {
    pub intercepts: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
}

impl LogitBlock {
    pub fn zeros(n_categories: usize, n_covariates: usize) -> Self {
        Self {
            intercepts: vec![0.0; n_categories - 1],
            coefficients: vec![vec![0.0; n_covariates]; n_categories - 1],
        }
    }

    pub fn new(intercepts: Vec<f64>, coefficients: Vec<Vec<f64>>) -> Result<Self> {
        if intercepts.is_empty() || coefficients.len() != intercepts.len() {
            return Err(Error::InvalidParameter(
                "logit block needs one intercept and coefficient row per non-base category".into(),
            ));
        }
        let d = coefficients[0].len();
        for row in &coefficients {
            if row.len() != d {
                return Err(Error::InvalidParameter("ragged coefficient rows".into()));
            }
        }
        for v in intercepts.iter().chain(coefficients.iter().flatten()) {
            if !v.is_finite() {
                return Err(Error::InvalidParameter("non-finite logit parameter".into()));
            }
        }
        Ok(Self {
            intercepts,
            coefficients,
        })
    }

    pub fn n_categories(&self) -> usize {
        self.intercepts.len() + 1
    }

    pub fn n_covariates(&self) -> usize {
        self.coefficients.first().map_or(0, Vec::len)
    }

    /// Linear predictors, with `eta[0] = 0` for the base category.
    fn linear_predictors(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.n_covariates() {
            return Err(Error::DimensionMismatch {
                expected: self.n_covariates(),
                got: z.len(),
            });
        }
        let mut eta = Vec::with_capacity(self.n_categories());
        eta.push(0.0);
        for (intercept, coefs) in self.intercepts.iter().zip(&self.coefficients) {
            let dot: f64 = coefs.iter().zip(z).map(|(c, x)| c * x).sum();
            eta.push(intercept + dot);
        }
        Ok(eta)
    }

    /// Relabel categories (`perm[new] = old`), re-expressing parameters
    /// against the new base category. Softmax shift-invariance makes the
    /// reconstructed probabilities exactly the permuted originals.
    pub fn permute_categories(&self, perm: &[usize]) -> Self {
        let eta_of = |cat: usize, d: usize| -> f64 {
            if cat == 0 {
                0.0
            } else if d == 0 {
                self.intercepts[cat - 1]
            } else {
                self.coefficients[cat - 1][d - 1]
            }
        };
        let n_cov = self.n_covariates();
        let mut intercepts = Vec::with_capacity(perm.len() - 1);
        let mut coefficients = Vec::with_capacity(perm.len() - 1);
        for &old in &perm[1..] {
            intercepts.push(eta_of(old, 0) - eta_of(perm[0], 0));
            coefficients.push(
                (1..=n_cov)
                    .map(|d| eta_of(old, d) - eta_of(perm[0], d))
                    .collect(),
            );
        }
        Self {
            intercepts,
            coefficients,
        }
    }
}

/// Softmax of the block's linear predictors at covariates `z`, computed with
/// max-subtraction so saturated intercepts cannot overflow.
pub fn logit_probs(block: &LogitBlock, z: &[f64]) -> Result<StateDistribution> {
    let eta = block.linear_predictors(z)?;
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    StateDistribution::new(exps.iter().map(|e| e / total).collect())
}

/// Resolve the per-patient transition matrix: row `i` is the softmax of
/// `blocks[i]` at the transition covariates.
pub fn transition_matrix_at(blocks: &[LogitBlock], z: &[f64]) -> Result<TransitionMatrix> {
    let rows: Result<Vec<Vec<f64>>> = blocks
        .iter()
        .map(|b| logit_probs(b, z).map(|d| d.probs().to_vec()))
        .collect();
    TransitionMatrix::new(rows?)
}

/// Expected-count data for one weighted multinomial-logit fit: each row is a
/// covariate vector with a nonnegative weight per category.
#[derive(Debug, Clone)]
pub struct WeightedCategoricalData {
    n_categories: usize,
    n_covariates: usize,
    rows: Vec<(Vec<f64>, Vec<f64>)>,
}

impl WeightedCategoricalData {
    pub fn new(n_categories: usize, n_covariates: usize) -> Self {
        Self {
            n_categories,
            n_covariates,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, covariates: Vec<f64>, weights: Vec<f64>) -> Result<()> {
        if covariates.len() != self.n_covariates {
            return Err(Error::DimensionMismatch {
                expected: self.n_covariates,
                got: covariates.len(),
            });
        }
        if weights.len() != self.n_categories {
            return Err(Error::DimensionMismatch {
                expected: self.n_categories,
                got: weights.len(),
            });
        }
        for w in &weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::InvalidParameter(format!("weight {w}")));
            }
        }
        for x in &covariates {
            if !x.is_finite() {
                return Err(Error::InvalidParameter(format!("covariate {x}")));
            }
        }
        self.rows.push((covariates, weights));
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    fn validate_for_fit(&self) -> Result<()> {
        let any_positive = self
            .rows
            .iter()
            .any(|(_, w)| w.iter().sum::<f64>() > 0.0);
        if self.rows.is_empty() || !any_positive {
            return Err(Error::EmptyWeightedData);
        }
        Ok(())
    }
}

/// Intercepts carry a ridge at this fraction of `l2`. Without it, a category
/// with zero expected count sends its intercept to infinity and the fit
/// never settles.
const INTERCEPT_RIDGE_FRACTION: f64 = 0.1;

/// The penalized weighted log-likelihood
/// `Σ_rows Σ_k w_k ln p_k(z) - (l2/2)·Σ_c ‖γ_c - γ̄‖²`
/// with analytic gradient and Hessian in the packed parameter vector
/// `[intercept_c, coef_c1..coef_cD]` per non-base category `c`.
///
/// The penalty is centered over all K categories (the base contributes its
/// implicit zero vector), which makes it invariant under state relabeling:
/// re-expressing the block against a different base category leaves the
/// penalty, and therefore the fit, unchanged. Intercepts get the same
/// treatment at [`INTERCEPT_RIDGE_FRACTION`] of the coefficient strength.
pub struct WeightedLogitProblem<'a> {
    data: &'a WeightedCategoricalData,
    l2: f64,
}

impl<'a> WeightedLogitProblem<'a> {
    pub fn new(data: &'a WeightedCategoricalData, l2: f64) -> Self {
        Self { data, l2 }
    }

    pub fn dim(&self) -> usize {
        (self.data.n_categories - 1) * (self.data.n_covariates + 1)
    }

    pub fn pack(&self, block: &LogitBlock) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.dim());
        for (intercept, coefs) in block.intercepts.iter().zip(&block.coefficients) {
            theta.push(*intercept);
            theta.extend_from_slice(coefs);
        }
        theta
    }

    pub fn unpack(&self, theta: &[f64]) -> LogitBlock {
        let d = self.data.n_covariates;
        let mut intercepts = Vec::new();
        let mut coefficients = Vec::new();
        for chunk in theta.chunks(d + 1) {
            intercepts.push(chunk[0]);
            coefficients.push(chunk[1..].to_vec());
        }
        LogitBlock {
            intercepts,
            coefficients,
        }
    }

    /// Per-row softmax probabilities at the packed parameters.
    fn row_probs(&self, theta: &[f64], z: &[f64]) -> Vec<f64> {
        let d = self.data.n_covariates;
        let k = self.data.n_categories;
        let mut eta = Vec::with_capacity(k);
        eta.push(0.0);
        for c in 0..k - 1 {
            let chunk = &theta[c * (d + 1)..(c + 1) * (d + 1)];
            let dot: f64 = chunk[1..].iter().zip(z).map(|(c, x)| c * x).sum();
            eta.push(chunk[0] + dot);
        }
        let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }

    /// Penalized objective. Evaluated through the linear predictors (never
    /// through `ln p`), so it stays finite for any finite parameters.
    pub fn objective(&self, theta: &[f64]) -> f64 {
        let d = self.data.n_covariates;
        let k = self.data.n_categories;
        let mut obj = 0.0;
        for (z, w) in &self.data.rows {
            let mut eta = Vec::with_capacity(k);
            eta.push(0.0);
            for c in 0..k - 1 {
                let chunk = &theta[c * (d + 1)..(c + 1) * (d + 1)];
                let dot: f64 = chunk[1..].iter().zip(z.iter()).map(|(c, x)| c * x).sum();
                eta.push(chunk[0] + dot);
            }
            let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + eta.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            let total: f64 = w.iter().sum();
            obj += eta.iter().zip(w).map(|(e, wk)| wk * e).sum::<f64>() - total * lse;
        }
        let mut penalty = 0.0;
        for col in 0..=d {
            let strength = self.column_strength(col);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for c in 0..k - 1 {
                let v = theta[c * (d + 1) + col];
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / k as f64;
            penalty += strength * (sum_sq - k as f64 * mean * mean);
        }
        obj - 0.5 * penalty
    }

    /// Ridge strength for one packed column (0 = intercept, 1..=D = coefs).
    fn column_strength(&self, col: usize) -> f64 {
        if col == 0 {
            self.l2 * INTERCEPT_RIDGE_FRACTION
        } else {
            self.l2
        }
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.data.n_covariates;
        let k = self.data.n_categories;
        let mut grad = vec![0.0; self.dim()];
        for (z, w) in &self.data.rows {
            let p = self.row_probs(theta, z);
            let total: f64 = w.iter().sum();
            for c in 1..k {
                let resid = w[c] - total * p[c];
                let base = (c - 1) * (d + 1);
                grad[base] += resid;
                for (dd, x) in z.iter().enumerate() {
                    grad[base + 1 + dd] += resid * x;
                }
            }
        }
        for col in 0..=d {
            let strength = self.column_strength(col);
            let mean = (0..k - 1)
                .map(|c| theta[c * (d + 1) + col])
                .sum::<f64>()
                / k as f64;
            for c in 0..k - 1 {
                let idx = c * (d + 1) + col;
                grad[idx] -= strength * (theta[idx] - mean);
            }
        }
        grad
    }

    /// Dense Hessian, row-major `dim x dim`.
    pub fn hessian(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.data.n_covariates;
        let k = self.data.n_categories;
        let dim = self.dim();
        let mut hess = vec![0.0; dim * dim];
        let mut x_ext = vec![0.0; d + 1];
        for (z, w) in &self.data.rows {
            let p = self.row_probs(theta, z);
            let total: f64 = w.iter().sum();
            x_ext[0] = 1.0;
            x_ext[1..].copy_from_slice(z);
            for c in 1..k {
                for e in 1..k {
                    let delta = if c == e { 1.0 } else { 0.0 };
                    let curv = -total * p[c] * (delta - p[e]);
                    if curv == 0.0 {
                        continue;
                    }
                    let rbase = (c - 1) * (d + 1);
                    let cbase = (e - 1) * (d + 1);
                    for a in 0..=d {
                        for b in 0..=d {
                            hess[(rbase + a) * dim + (cbase + b)] += curv * x_ext[a] * x_ext[b];
                        }
                    }
                }
            }
        }
        for col in 0..=d {
            let strength = self.column_strength(col);
            for c in 0..k - 1 {
                for e in 0..k - 1 {
                    let delta = if c == e { 1.0 } else { 0.0 };
                    let row = c * (d + 1) + col;
                    let colidx = e * (d + 1) + col;
                    hess[row * dim + colidx] -= strength * (delta - 1.0 / k as f64);
                }
            }
        }
        hess
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix (row-major,
/// in place). Returns `None` when the matrix is not numerically PD.
fn cholesky(a: &mut [f64], n: usize) -> Option<()> {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if sum <= 1e-300 || !sum.is_finite() {
                    return None;
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    Some(())
}

/// Solve `A x = b` for symmetric positive-definite `A` via Cholesky.
fn solve_spd(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = a.to_vec();
    cholesky(&mut l, n)?;
    // forward: L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    // backward: L' x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    Some(x)
}

const MAX_FIT_ITERS: usize = 100;
const GRAD_TOL: f64 = 1e-6;

/// Result of a weighted multinomial-logit fit.
#[derive(Debug, Clone)]
pub struct LogitFit {
    pub block: LogitBlock,
    pub converged: bool,
    pub iters: usize,
}

/// Maximize the penalized weighted log-likelihood by Newton-Raphson with
/// step-halving, falling back to gradient ascent when the Hessian is not
/// negative definite. The returned parameters never score below `init`
/// (generalized-EM contract); non-convergence is reported, not an error.
pub fn fit_weighted_multinomial_logit(
    data: &WeightedCategoricalData,
    init: &LogitBlock,
    l2: f64,
) -> Result<LogitFit> {
    data.validate_for_fit()?;
    let problem = WeightedLogitProblem::new(data, l2);
    let mut theta = problem.pack(init);
    let mut obj = problem.objective(&theta);
    if !obj.is_finite() {
        return Err(Error::NonFiniteObjective);
    }

    let mut converged = false;
    let mut iters = 0;
    for iter in 0..MAX_FIT_ITERS {
        iters = iter + 1;
        let grad = problem.gradient(&theta);
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm < GRAD_TOL {
            converged = true;
            iters = iter;
            break;
        }

        // Newton direction from -H (positive definite at a proper maximum).
        let mut neg_hess = problem.hessian(&theta);
        for v in neg_hess.iter_mut() {
            *v = -*v;
        }
        let mut direction = solve_spd(&neg_hess, &grad);
        if let Some(dir) = &direction {
            if dir.iter().any(|v| !v.is_finite()) {
                direction = None;
            }
        }
        let direction = direction.unwrap_or_else(|| {
            // Gradient ascent fallback, scaled to a unit infinity-norm step.
            grad.iter().map(|g| g / grad_norm).collect()
        });

        let mut accepted = false;
        let mut step = 1.0;
        for _ in 0..40 {
            let cand: Vec<f64> = theta
                .iter()
                .zip(&direction)
                .map(|(t, d)| t + step * d)
                .collect();
            let cand_obj = problem.objective(&cand);
            if cand_obj.is_finite() && cand_obj > obj {
                theta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No improving step in this direction; we are at (or numerically
            // indistinguishable from) a maximum along it.
            break;
        }
    }

    Ok(LogitFit {
        block: problem.unpack(&theta),
        converged,
        iters,
    })
}
