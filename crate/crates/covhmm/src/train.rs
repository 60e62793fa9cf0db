//! Baum-Welch EM for the covariate-conditioned HMM.
//!
//! The E-step resolves each patient's initial distribution and transition
//! matrix from their covariates and runs forward-backward. The M-step
//! re-fits the initial and transition logit blocks by weighted multinomial
//! logistic regression on the expected counts (a generalized-EM move: the
//! Newton fitter improves its objective rather than fully maximizing it) and
//! updates the Gaussian emissions in closed form. Every accepted M-step
//! weakly increases the per-block expected complete-data log-likelihood, so
//! the log-likelihood trace is nondecreasing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{
    forward_backward, EmissionParams, ForwardBackwardResult, StateDistribution, TransitionMatrix,
    SIGMA_FLOOR,
};
use crate::ingest::PatientSequence;
use crate::link::{
    fit_weighted_multinomial_logit, logit_probs, transition_matrix_at, CovariateVector,
    LogitBlock, WeightedCategoricalData, WeightedLogitProblem, INIT_COVARIATE_NAMES,
    TRANS_COVARIATE_NAMES,
};
use crate::seeding::derive_seed;

/// Indices of continuous predictors within the initial-covariate projection
/// (age and surgery hours); everything else is a 0/1 flag left unscaled.
const CONTINUOUS_IDX: [usize; 2] = [0, 2];

/// Per-predictor standardization statistics, stored with the model so
/// classification applies exactly the scaling used in training.
///
/// Covers the 11 initial-model predictors; the 3 transition predictors are
/// its leading entries (age, gender, surgery hours).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateScaler {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl CovariateScaler {
    pub fn identity() -> Self {
        let d = INIT_COVARIATE_NAMES.len();
        Self {
            mean: vec![0.0; d],
            sd: vec![1.0; d],
        }
    }

    /// Estimate mean/sd of the continuous predictors from training rows.
    /// Flags keep identity scaling; a constant predictor gets sd 1.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let mut scaler = Self::identity();
        if rows.is_empty() {
            return scaler;
        }
        let n = rows.len() as f64;
        for &idx in &CONTINUOUS_IDX {
            let mean = rows.iter().map(|r| r[idx]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[idx] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            scaler.mean[idx] = mean;
            scaler.sd[idx] = if sd > 0.0 { sd } else { 1.0 };
        }
        scaler
    }

    pub fn scale_init(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i]) / self.sd[i])
            .collect()
    }

    pub fn scale_trans(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .take(TRANS_COVARIATE_NAMES.len())
            .map(|(i, v)| (v - self.mean[i]) / self.sd[i])
            .collect()
    }
}

/// The full parameter vector of one class-conditional model: initial-state
/// logit block, one transition logit block per state, Gaussian emissions,
/// and the covariate standardization it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub n_states: usize,
    pub theta1: LogitBlock,
    pub theta2: Vec<LogitBlock>,
    pub theta3: EmissionParams,
    pub standardization: CovariateScaler,
}

impl HmmParams {
    pub fn new(
        theta1: LogitBlock,
        theta2: Vec<LogitBlock>,
        theta3: EmissionParams,
        standardization: CovariateScaler,
    ) -> Result<Self> {
        let params = Self {
            n_states: theta3.n_states(),
            theta1,
            theta2,
            theta3,
            standardization,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_states;
        if k < 2 {
            return Err(Error::InvalidParameter("need at least 2 states".into()));
        }
        if self.theta3.n_states() != k
            || self.theta1.n_categories() != k
            || self.theta2.len() != k
            || self.theta2.iter().any(|b| b.n_categories() != k)
        {
            return Err(Error::InvalidParameter(
                "state counts disagree across theta1/theta2/theta3".into(),
            ));
        }
        if self.theta1.n_covariates() != INIT_COVARIATE_NAMES.len() {
            return Err(Error::DimensionMismatch {
                expected: INIT_COVARIATE_NAMES.len(),
                got: self.theta1.n_covariates(),
            });
        }
        for b in &self.theta2 {
            if b.n_covariates() != TRANS_COVARIATE_NAMES.len() {
                return Err(Error::DimensionMismatch {
                    expected: TRANS_COVARIATE_NAMES.len(),
                    got: b.n_covariates(),
                });
            }
        }
        if self.standardization.mean.len() != INIT_COVARIATE_NAMES.len()
            || self.standardization.sd.len() != INIT_COVARIATE_NAMES.len()
        {
            return Err(Error::InvalidParameter(
                "standardization stats must cover every initial-model predictor".into(),
            ));
        }
        Ok(())
    }

    /// Initial-state distribution for a concrete patient.
    pub fn initial_distribution(&self, cv: &CovariateVector) -> Result<StateDistribution> {
        let z = self.standardization.scale_init(&cv.init_covariates());
        logit_probs(&self.theta1, &z)
    }

    /// Transition matrix for a concrete patient.
    pub fn transition_matrix(&self, cv: &CovariateVector) -> Result<TransitionMatrix> {
        let z = self.standardization.scale_trans(&cv.trans_covariates());
        transition_matrix_at(&self.theta2, &z)
    }

    /// Relabel states (`perm[new] = old`), permuting emissions, transition
    /// rows, and logit categories consistently.
    pub fn permuted_states(&self, perm: &[usize]) -> Self {
        Self {
            n_states: self.n_states,
            theta1: self.theta1.permute_categories(perm),
            theta2: perm
                .iter()
                .map(|&old| self.theta2[old].permute_categories(perm))
                .collect(),
            theta3: self.theta3.permuted(perm),
            standardization: self.standardization.clone(),
        }
    }

    /// States reordered by ascending emission mean, so the highest-mean
    /// ("high risk") state always carries the last index.
    pub fn sorted_by_emission_mean(&self) -> Self {
        let mut perm: Vec<usize> = (0..self.n_states).collect();
        perm.sort_by(|&a, &b| self.theta3.mu()[a].partial_cmp(&self.theta3.mu()[b]).unwrap());
        self.permuted_states(&perm)
    }
}

/// EM driver knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_em_iters: usize,
    pub loglik_rel_tol: f64,
    pub seed: u64,
    pub n_restarts: usize,
    pub l2: f64,
    pub n_states: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_em_iters: 200,
            loglik_rel_tol: 1e-6,
            seed: 0,
            n_restarts: 5,
            l2: 1e-4,
            n_states: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loglik_rel_tol <= 0.0 || !self.loglik_rel_tol.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "loglik_rel_tol {}",
                self.loglik_rel_tol
            )));
        }
        if self.l2 < 0.0 || !self.l2.is_finite() {
            return Err(Error::InvalidParameter(format!("l2 {}", self.l2)));
        }
        if self.max_em_iters == 0 || self.n_restarts == 0 {
            return Err(Error::InvalidParameter(
                "max_em_iters and n_restarts must be positive".into(),
            ));
        }
        if self.n_states < 2 {
            return Err(Error::InvalidParameter("need at least 2 states".into()));
        }
        Ok(())
    }
}

/// Per-run training diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Total log-likelihood after each E-step; nondecreasing (1e-8 slack).
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iters: usize,
    pub restart_index_chosen: usize,
    /// Number of M-steps where some state had essentially zero emission
    /// weight and kept its previous parameters.
    pub starvation_events: usize,
}

impl TrainReport {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

/// E-step output: total log-likelihood plus per-sequence posteriors.
#[derive(Debug)]
pub struct EStep {
    pub total_log_likelihood: f64,
    pub posteriors: Vec<ForwardBackwardResult>,
}

/// Run forward-backward on every sequence under its covariate-resolved
/// chain. Per-sequence work runs in parallel; the total is summed in input
/// order so results are deterministic.
pub fn e_step(sequences: &[PatientSequence], params: &HmmParams) -> Result<EStep> {
    let posteriors: Result<Vec<ForwardBackwardResult>> = sequences
        .par_iter()
        .map(|ps| {
            let run = || -> Result<ForwardBackwardResult> {
                let init = params.initial_distribution(&ps.covariates)?;
                let trans = params.transition_matrix(&ps.covariates)?;
                forward_backward(&ps.bins, &init, &trans, &params.theta3)
            };
            run().map_err(|e| e.for_patient(&ps.patient_id))
        })
        .collect();
    let posteriors = posteriors?;
    let total_log_likelihood = posteriors.iter().map(|fb| fb.log_likelihood).sum();
    Ok(EStep {
        total_log_likelihood,
        posteriors,
    })
}

/// M-step output: updated parameters plus starvation diagnostics.
#[derive(Debug)]
pub struct MStepOutcome {
    pub params: HmmParams,
    /// States whose total emission weight fell below 1e-8 and kept their
    /// previous mu/sigma.
    pub starved_states: Vec<usize>,
}

const STARVATION_WEIGHT: f64 = 1e-8;

/// Fit a logit block on expected counts, keeping the previous block unless
/// the unpenalized expected complete-data term improves. The L2 penalty
/// stabilizes the Newton steps but must not be allowed to trade away
/// likelihood, or the EM trace could dip.
fn gem_logit_update(
    data: &WeightedCategoricalData,
    current: &LogitBlock,
    l2: f64,
) -> Result<LogitBlock> {
    if data.n_rows() == 0 {
        return Ok(current.clone());
    }
    let fitted = match fit_weighted_multinomial_logit(data, current, l2) {
        Ok(fit) => fit.block,
        Err(Error::EmptyWeightedData) => return Ok(current.clone()),
        Err(e) => return Err(e),
    };
    let unpenalized = WeightedLogitProblem::new(data, 0.0);
    let old = unpenalized.objective(&unpenalized.pack(current));
    let new = unpenalized.objective(&unpenalized.pack(&fitted));
    if new >= old {
        Ok(fitted)
    } else {
        Ok(current.clone())
    }
}

/// Re-estimate all parameters from the posteriors of the immediately
/// preceding E-step on `params`.
pub fn m_step(
    sequences: &[PatientSequence],
    posteriors: &[ForwardBackwardResult],
    params: &HmmParams,
    config: &TrainConfig,
) -> Result<MStepOutcome> {
    let k = params.n_states;
    let scaler = &params.standardization;

    // theta1: initial-state block on (init covariates, gamma_1) rows.
    let mut init_data =
        WeightedCategoricalData::new(k, INIT_COVARIATE_NAMES.len());
    for (ps, fb) in sequences.iter().zip(posteriors) {
        init_data.push(
            scaler.scale_init(&ps.covariates.init_covariates()),
            fb.gamma[0].clone(),
        )?;
    }
    let theta1 = gem_logit_update(&init_data, &params.theta1, config.l2)?;

    // theta2 row i: transition block on (trans covariates, sum_t xi_t(i, .)).
    let mut theta2 = Vec::with_capacity(k);
    for i in 0..k {
        let mut row_data =
            WeightedCategoricalData::new(k, TRANS_COVARIATE_NAMES.len());
        for (ps, fb) in sequences.iter().zip(posteriors) {
            if fb.xi.is_empty() {
                continue;
            }
            let mut weights = vec![0.0; k];
            for xi_t in &fb.xi {
                for (j, w) in weights.iter_mut().enumerate() {
                    *w += xi_t[i][j];
                }
            }
            row_data.push(scaler.scale_trans(&ps.covariates.trans_covariates()), weights)?;
        }
        theta2.push(gem_logit_update(&row_data, &params.theta2[i], config.l2)?);
    }

    // theta3: weighted Gaussian MLE over observed bins; zero-weight states
    // keep their previous parameters.
    let mut weight = vec![0.0; k];
    let mut weighted_sum = vec![0.0; k];
    for (ps, fb) in sequences.iter().zip(posteriors) {
        for t in 0..ps.bins.len() {
            if let Some(v) = ps.bins.get(t) {
                for j in 0..k {
                    weight[j] += fb.gamma[t][j];
                    weighted_sum[j] += fb.gamma[t][j] * v;
                }
            }
        }
    }
    let mut mu = params.theta3.mu().to_vec();
    let mut sigma = params.theta3.sigma().to_vec();
    let mut starved_states = Vec::new();
    for j in 0..k {
        if weight[j] < STARVATION_WEIGHT {
            starved_states.push(j);
            continue;
        }
        mu[j] = weighted_sum[j] / weight[j];
    }
    let mut sq_dev = vec![0.0; k];
    for (ps, fb) in sequences.iter().zip(posteriors) {
        for t in 0..ps.bins.len() {
            if let Some(v) = ps.bins.get(t) {
                for j in 0..k {
                    sq_dev[j] += fb.gamma[t][j] * (v - mu[j]) * (v - mu[j]);
                }
            }
        }
    }
    for j in 0..k {
        if weight[j] >= STARVATION_WEIGHT {
            sigma[j] = (sq_dev[j] / weight[j]).sqrt().max(SIGMA_FLOOR);
        }
    }
    let theta3 = EmissionParams::new(mu, sigma)?;

    let params = HmmParams {
        n_states: k,
        theta1,
        theta2,
        theta3,
        standardization: params.standardization.clone(),
    };
    Ok(MStepOutcome {
        params,
        starved_states,
    })
}

/// Quantile of a sorted slice with linear interpolation.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Quantile anchors for the emission-mean initialization: low/median/high
/// for the default 3-state model, an even spread otherwise.
fn init_quantiles(k: usize) -> Vec<f64> {
    if k == 3 {
        vec![0.25, 0.50, 0.90]
    } else {
        (0..k)
            .map(|j| 0.10 + 0.80 * j as f64 / (k - 1) as f64)
            .collect()
    }
}

/// Build the initialization for one restart. Restart 0 uses the quantile
/// anchors directly; later restarts jitter each mean by up to ±0.3 °F.
fn restart_init(
    sequences: &[PatientSequence],
    scaler: &CovariateScaler,
    config: &TrainConfig,
    restart: usize,
) -> Result<HmmParams> {
    let k = config.n_states;
    let mut values: Vec<f64> = sequences
        .iter()
        .flat_map(|ps| ps.bins.iter().flatten())
        .collect();
    if values.is_empty() {
        return Err(Error::AllMissing);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64)
        .sqrt()
        .max(SIGMA_FLOOR);

    let mut mu: Vec<f64> = init_quantiles(k)
        .into_iter()
        .map(|q| quantile(&values, q))
        .collect();
    if restart > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, restart as u64));
        for m in mu.iter_mut() {
            *m += rng.random_range(-0.3..0.3);
        }
    }
    HmmParams::new(
        LogitBlock::zeros(k, INIT_COVARIATE_NAMES.len()),
        (0..k)
            .map(|_| LogitBlock::zeros(k, TRANS_COVARIATE_NAMES.len()))
            .collect(),
        EmissionParams::new(mu, vec![sd; k])?,
        scaler.clone(),
    )
}

/// One EM run from an explicit initialization. Returns the parameters that
/// produced the last trace entry (no state reordering).
pub fn fit_from_init(
    sequences: &[PatientSequence],
    init: HmmParams,
    config: &TrainConfig,
) -> Result<(HmmParams, TrainReport)> {
    config.validate()?;
    init.validate()?;
    let mut params = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut starvation_events = 0;
    for iter in 0..config.max_em_iters {
        let est = e_step(sequences, &params)?;
        if let Some(&prev) = trace.last() {
            let rel = (est.total_log_likelihood - prev).abs() / prev.abs().max(1.0);
            trace.push(est.total_log_likelihood);
            if rel < config.loglik_rel_tol {
                converged = true;
                break;
            }
        } else {
            trace.push(est.total_log_likelihood);
        }
        if iter + 1 == config.max_em_iters {
            break;
        }
        let outcome = m_step(sequences, &est.posteriors, &params, config)?;
        if !outcome.starved_states.is_empty() {
            starvation_events += 1;
        }
        params = outcome.params;
    }
    let iters = trace.len();
    Ok((
        params,
        TrainReport {
            loglik_trace: trace,
            converged,
            iters,
            restart_index_chosen: 0,
            starvation_events,
        },
    ))
}

/// Full training entry point: seeded multi-restart EM over one class's
/// sequences. The best restart (by final log-likelihood, ties to the lower
/// index) is returned with its states sorted by ascending emission mean.
pub fn fit(sequences: &[PatientSequence], config: &TrainConfig) -> Result<(HmmParams, TrainReport)> {
    config.validate()?;
    if sequences.len() < 2 {
        return Err(Error::TooFewSequences);
    }
    let init_rows: Vec<Vec<f64>> = sequences
        .iter()
        .map(|ps| ps.covariates.init_covariates())
        .collect();
    let scaler = CovariateScaler::fit(&init_rows);

    let inits: Result<Vec<HmmParams>> = (0..config.n_restarts)
        .map(|r| restart_init(sequences, &scaler, config, r))
        .collect();
    let inits = inits?;

    let runs: Result<Vec<(HmmParams, TrainReport)>> = inits
        .into_par_iter()
        .map(|init| fit_from_init(sequences, init, config))
        .collect();
    let runs = runs?;

    let mut best = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.1.final_log_likelihood() > runs[best].1.final_log_likelihood() {
            best = r;
        }
    }
    let (params, mut report) = runs.into_iter().nth(best).unwrap();
    report.restart_index_chosen = best;
    Ok((params.sorted_by_emission_mean(), report))
}

/// Model file contents: parameters plus training metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(flatten)]
    pub params: HmmParams,
    pub metadata: TrainMetadata,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub seed: u64,
    pub iterations: usize,
    pub final_log_likelihood: f64,
    pub converged: bool,
    pub restart_index: usize,
}

impl ModelDocument {
    pub fn new(params: HmmParams, seed: u64, report: &TrainReport) -> Self {
        Self {
            params,
            metadata: TrainMetadata {
                seed,
                iterations: report.iters,
                final_log_likelihood: report.final_log_likelihood(),
                converged: report.converged,
                restart_index: report.restart_index_chosen,
            },
        }
    }
}
