//! Two-model Bayesian sequence classification and prefix-based risk scoring.
//!
//! A trained [`ClassifierPair`] holds one model per class plus the class
//! prior. The posterior P(complication | sequence) is computed in log space
//! from the two sequence log-likelihoods, so a likelihood ratio hundreds of
//! log-units from 1 still yields a clean probability. The streaming scorer
//! keeps both models' scaled forward vectors and updates in O(states²) per
//! new bin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{
    sequence_log_likelihood, EmissionParams, ObservedSequence, StateDistribution,
    TransitionMatrix,
};
use crate::link::CovariateVector;
use crate::train::HmmParams;

/// Sequence class: complication (`C`) or non-complication (`NC`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "C")]
    Complication,
    #[serde(rename = "NC")]
    NonComplication,
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassLabel::Complication => write!(f, "C"),
            ClassLabel::NonComplication => write!(f, "NC"),
        }
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C" => Ok(ClassLabel::Complication),
            "NC" => Ok(ClassLabel::NonComplication),
            other => Err(Error::InvalidParameter(format!(
                "label {other:?} not in {{C, NC}}"
            ))),
        }
    }
}

/// The deployable classifier: one model per class plus the class prior P(C).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierPair {
    pub lambda_c: HmmParams,
    pub lambda_nc: HmmParams,
    pub prior_c: f64,
}

impl ClassifierPair {
    pub fn new(lambda_c: HmmParams, lambda_nc: HmmParams, prior_c: f64) -> Result<Self> {
        if !(prior_c > 0.0 && prior_c < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "prior_c {prior_c} must lie strictly inside (0, 1)"
            )));
        }
        lambda_c.validate()?;
        lambda_nc.validate()?;
        if lambda_c.n_states != lambda_nc.n_states {
            return Err(Error::InvalidParameter(format!(
                "state counts disagree: C has {}, NC has {}",
                lambda_c.n_states, lambda_nc.n_states
            )));
        }
        Ok(Self {
            lambda_c,
            lambda_nc,
            prior_c,
        })
    }

    /// Log prior odds ln(P(C) / P(NC)).
    fn log_prior_odds(&self) -> f64 {
        self.prior_c.ln() - (1.0 - self.prior_c).ln()
    }
}

/// Posterior from the log-likelihood difference and log prior odds:
/// logistic(ℓ_C - ℓ_NC + ln P(C)/P(NC)). Saturates to 0/1 without NaN.
fn posterior_from_loglik(ll_c: f64, ll_nc: f64, log_prior_odds: f64) -> f64 {
    let d = ll_c - ll_nc + log_prior_odds;
    1.0 / (1.0 + (-d).exp())
}

/// P(complication | sequence) for one patient under the pair.
pub fn posterior(
    seq: &ObservedSequence,
    cv: &CovariateVector,
    pair: &ClassifierPair,
) -> Result<f64> {
    let ll_c = model_log_likelihood(seq, cv, &pair.lambda_c)?;
    let ll_nc = model_log_likelihood(seq, cv, &pair.lambda_nc)?;
    Ok(posterior_from_loglik(ll_c, ll_nc, pair.log_prior_odds()))
}

/// P(non-complication | sequence) = 1 - posterior.
pub fn posterior_complement(
    seq: &ObservedSequence,
    cv: &CovariateVector,
    pair: &ClassifierPair,
) -> Result<f64> {
    Ok(1.0 - posterior(seq, cv, pair)?)
}

fn model_log_likelihood(
    seq: &ObservedSequence,
    cv: &CovariateVector,
    params: &HmmParams,
) -> Result<f64> {
    let init = params.initial_distribution(cv)?;
    let trans = params.transition_matrix(cv)?;
    sequence_log_likelihood(seq, &init, &trans, &params.theta3)
}

/// Posterior risk score per prefix length: `scores[t] = P(C | O_{1..=t+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScoreSeries {
    pub scores: Vec<f64>,
}

/// Incremental scorer for one patient stream. Feed bins as they arrive;
/// each push returns the posterior given everything seen so far.
pub struct StreamScorer {
    c: ModelStream,
    nc: ModelStream,
    log_prior_odds: f64,
    bins_seen: usize,
}

struct ModelStream {
    init: StateDistribution,
    trans: TransitionMatrix,
    emit: EmissionParams,
    alpha: Vec<f64>,
    log_likelihood: f64,
}

impl ModelStream {
    fn new(cv: &CovariateVector, params: &HmmParams) -> Result<Self> {
        Ok(Self {
            init: params.initial_distribution(cv)?,
            trans: params.transition_matrix(cv)?,
            emit: params.theta3.clone(),
            alpha: Vec::new(),
            log_likelihood: 0.0,
        })
    }

    fn push(&mut self, t: usize, bin: Option<f64>) -> Result<()> {
        let k = self.init.n_states();
        let factor = |j: usize| match bin {
            Some(v) => self.emit.density(j, v),
            None => 1.0,
        };
        let mut next = vec![0.0; k];
        if self.alpha.is_empty() {
            for (j, n) in next.iter_mut().enumerate() {
                *n = self.init.probs()[j] * factor(j);
            }
        } else {
            for (j, n) in next.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..k {
                    acc += self.alpha[i] * self.trans.prob(i, j);
                }
                *n = acc * factor(j);
            }
        }
        let mass: f64 = next.iter().sum();
        if mass <= 0.0 || !mass.is_finite() {
            return Err(Error::DegenerateLikelihood { t });
        }
        for v in next.iter_mut() {
            *v /= mass;
        }
        self.alpha = next;
        self.log_likelihood += mass.ln();
        Ok(())
    }
}

impl StreamScorer {
    pub fn new(cv: &CovariateVector, pair: &ClassifierPair) -> Result<Self> {
        Ok(Self {
            c: ModelStream::new(cv, &pair.lambda_c)?,
            nc: ModelStream::new(cv, &pair.lambda_nc)?,
            log_prior_odds: pair.log_prior_odds(),
            bins_seen: 0,
        })
    }

    /// Consume the next bin (`None` = missing) and return the updated
    /// posterior risk score.
    pub fn push(&mut self, bin: Option<f64>) -> Result<f64> {
        let t = self.bins_seen;
        self.c.push(t, bin)?;
        self.nc.push(t, bin)?;
        self.bins_seen += 1;
        Ok(posterior_from_loglik(
            self.c.log_likelihood,
            self.nc.log_likelihood,
            self.log_prior_odds,
        ))
    }

    pub fn bins_seen(&self) -> usize {
        self.bins_seen
    }
}

/// Risk score after every prefix of the sequence, computed incrementally.
/// The final entry equals [`posterior`] of the full sequence.
pub fn risk_series(
    seq: &ObservedSequence,
    cv: &CovariateVector,
    pair: &ClassifierPair,
) -> Result<RiskScoreSeries> {
    let mut scorer = StreamScorer::new(cv, pair)?;
    let mut scores = Vec::with_capacity(seq.len());
    for bin in seq.iter() {
        scores.push(scorer.push(bin)?);
    }
    Ok(RiskScoreSeries { scores })
}

/// Hard label at the given threshold; the threshold is inclusive, so a
/// posterior exactly at it classifies as complication.
pub fn classify(
    seq: &ObservedSequence,
    cv: &CovariateVector,
    pair: &ClassifierPair,
    threshold: f64,
) -> Result<ClassLabel> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold {threshold} must lie strictly inside (0, 1)"
        )));
    }
    let p = posterior(seq, cv, pair)?;
    Ok(if p >= threshold {
        ClassLabel::Complication
    } else {
        ClassLabel::NonComplication
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::EmissionParams;
    use crate::link::{LogitBlock, INIT_COVARIATE_NAMES, TRANS_COVARIATE_NAMES};
    use crate::train::CovariateScaler;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn params(mu: Vec<f64>, sigma: Vec<f64>) -> HmmParams {
        let k = mu.len();
        HmmParams::new(
            LogitBlock::zeros(k, INIT_COVARIATE_NAMES.len()),
            (0..k)
                .map(|_| LogitBlock::zeros(k, TRANS_COVARIATE_NAMES.len()))
                .collect(),
            EmissionParams::new(mu, sigma).unwrap(),
            CovariateScaler::identity(),
        )
        .unwrap()
    }

    fn cv() -> CovariateVector {
        CovariateVector::new(60.0, 1, 3.0, [0, 1, 0, 0, 0, 0, 0, 0]).unwrap()
    }

    fn identical_pair(prior_c: f64) -> ClassifierPair {
        let m = params(vec![97.8, 98.6, 99.8], vec![0.4, 0.4, 1.0]);
        ClassifierPair::new(m.clone(), m, prior_c).unwrap()
    }

    #[test]
    fn identical_models_return_the_prior() {
        let pair = identical_pair(0.24);
        let seq = ObservedSequence::dense(vec![98.5, 99.0, 100.3]).unwrap();
        let p = posterior(&seq, &cv(), &pair).unwrap();
        assert_relative_eq!(p, 0.24, epsilon = 1e-12);
    }

    #[test]
    fn log_likelihood_gap_of_ln3_at_even_prior_gives_three_quarters() {
        assert_relative_eq!(
            posterior_from_loglik(3.0f64.ln(), 0.0, 0.0),
            0.75,
            epsilon = 1e-12
        );
    }

    #[test]
    fn extreme_likelihood_gaps_stay_in_unit_interval() {
        for d in [-1000.0, -500.0, 500.0, 1000.0] {
            let p = posterior_from_loglik(d, 0.0, 0.0);
            assert!(p.is_finite());
            assert!((0.0..=1.0).contains(&p));
        }
        assert_eq!(posterior_from_loglik(1000.0, 0.0, 0.0), 1.0);
        assert_eq!(posterior_from_loglik(-1000.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn posterior_increases_with_complication_likelihood() {
        let mut last = 0.0;
        for ll_c in [-10.0, -5.0, -1.0, 0.0, 2.0] {
            let p = posterior_from_loglik(ll_c, -3.0, 0.2);
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn degenerate_priors_are_rejected() {
        let m = params(vec![98.0, 99.0], vec![0.5, 0.5]);
        for bad in [0.0, 1.0, -0.1, 1.5] {
            assert!(ClassifierPair::new(m.clone(), m.clone(), bad).is_err());
        }
    }

    #[test]
    fn complement_sums_to_one_exactly() {
        let pair = identical_pair(0.3);
        let seq = ObservedSequence::dense(vec![98.5, 99.9]).unwrap();
        let p = posterior(&seq, &cv(), &pair).unwrap();
        let q = posterior_complement(&seq, &cv(), &pair).unwrap();
        assert_eq!(p + q, 1.0);
    }

    #[test]
    fn single_bin_series_equals_posterior() {
        let c = params(vec![97.8, 98.6, 99.8], vec![0.4, 0.4, 1.0]);
        let nc = params(vec![97.7, 98.5, 99.4], vec![0.4, 0.4, 0.9]);
        let pair = ClassifierPair::new(c, nc, 0.24).unwrap();
        let seq = ObservedSequence::dense(vec![99.2]).unwrap();
        let series = risk_series(&seq, &cv(), &pair).unwrap();
        assert_eq!(series.scores.len(), 1);
        let p = posterior(&seq, &cv(), &pair).unwrap();
        assert_relative_eq!(series.scores[0], p, epsilon = 1e-12);
    }

    #[test]
    fn incremental_scores_match_prefix_recomputation() {
        let c = params(vec![97.8, 98.6, 99.8], vec![0.4, 0.4, 1.0]);
        let nc = params(vec![97.7, 98.5, 99.4], vec![0.4, 0.4, 0.9]);
        let pair = ClassifierPair::new(c, nc, 0.3).unwrap();
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..20 {
            let t = rng.random_range(1..15);
            let bins: Vec<Option<f64>> = (0..t)
                .map(|_| {
                    if rng.random_range(0.0..1.0) < 0.15 {
                        None
                    } else {
                        Some(rng.random_range(96.5..102.0))
                    }
                })
                .collect();
            let seq = ObservedSequence::new(bins).unwrap();
            let series = risk_series(&seq, &cv(), &pair).unwrap();
            for n in 1..=seq.len() {
                let prefix = seq.prefix(n).unwrap();
                let p = posterior(&prefix, &cv(), &pair).unwrap();
                assert!(
                    (series.scores[n - 1] - p).abs() <= 1e-12,
                    "prefix {n}: stream {} vs scratch {p}",
                    series.scores[n - 1]
                );
            }
        }
    }

    #[test]
    fn all_missing_prefix_scores_at_the_prior() {
        // Same transition structure in both models: missing bins add no
        // information, so every score equals the prior.
        let pair = identical_pair(0.24);
        let seq = ObservedSequence::new(vec![None, None, Some(98.6)]).unwrap();
        let series = risk_series(&seq, &cv(), &pair).unwrap();
        assert_relative_eq!(series.scores[0], 0.24, epsilon = 1e-12);
        assert_relative_eq!(series.scores[1], 0.24, epsilon = 1e-12);
    }

    #[test]
    fn classification_threshold_is_inclusive_and_monotone() {
        let pair = identical_pair(0.24);
        let seq = ObservedSequence::dense(vec![98.6]).unwrap();
        // Posterior is exactly the prior 0.24.
        assert_eq!(
            classify(&seq, &cv(), &pair, 0.5).unwrap(),
            ClassLabel::NonComplication
        );
        assert_eq!(
            classify(&seq, &cv(), &pair, 0.24).unwrap(),
            ClassLabel::Complication
        );
        // Raising the threshold can only flip C -> NC, never the reverse.
        let mut last_was_c = true;
        for threshold in [0.1, 0.2, 0.24, 0.3, 0.9] {
            let is_c = classify(&seq, &cv(), &pair, threshold).unwrap()
                == ClassLabel::Complication;
            assert!(!is_c || last_was_c || is_c == last_was_c);
            if last_was_c && !is_c {
                last_was_c = false;
            }
        }
        assert!(classify(&seq, &cv(), &pair, 0.0).is_err());
        assert!(classify(&seq, &cv(), &pair, 1.0).is_err());
    }
}
