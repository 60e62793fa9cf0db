//! Inference primitives for a small-state HMM whose initial distribution and
//! transition matrix are fixed within a sequence (they vary per patient, not
//! per time step).
//!
//! All recursions follow Rabiner's scaled formulation: at every step the
//! forward vector is renormalized and the log-likelihood is accumulated from
//! the per-step normalizers, so sequences up to the 60-bin horizon never
//! underflow even with sub-degree emission widths. Viterbi runs in log space.
//!
//! Missing bins contribute an emission factor of 1 for every state while the
//! transition step is still applied (missing-at-random).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of one observation bin in hours.
pub const BIN_HOURS: f64 = 4.0;

/// Study horizon: 10 days of 4-hour bins.
pub const MAX_BINS: usize = 60;

/// Lower bound on emission standard deviations, in degrees Fahrenheit.
/// Guards EM against collapsing a state onto a single observation.
pub const SIGMA_FLOOR: f64 = 1e-3;

const DIST_TOL: f64 = 1e-12;
const LN_SQRT_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Per-state Gaussian emission parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionParams {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl EmissionParams {
    /// Build emission parameters, flooring each sigma at [`SIGMA_FLOOR`].
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.is_empty() || mu.len() != sigma.len() {
            return Err(Error::InvalidParameter(format!(
                "emission dimensions: {} means, {} sigmas",
                mu.len(),
                sigma.len()
            )));
        }
        for (j, &m) in mu.iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::NonFinite(j));
            }
        }
        let mut sigma = sigma;
        for (j, s) in sigma.iter_mut().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFinite(j));
            }
            if *s < SIGMA_FLOOR {
                *s = SIGMA_FLOOR;
            }
        }
        Ok(Self { mu, sigma })
    }

    pub fn n_states(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Gaussian density of `value` under state `state`.
    pub fn density(&self, state: usize, value: f64) -> f64 {
        self.ln_density(state, value).exp()
    }

    /// Log density; preferred inside recursions.
    pub fn ln_density(&self, state: usize, value: f64) -> f64 {
        let z = (value - self.mu[state]) / self.sigma[state];
        -self.sigma[state].ln() - LN_SQRT_TWO_PI - 0.5 * z * z
    }

    /// Reorder states by the given permutation (`perm[new] = old`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            mu: perm.iter().map(|&o| self.mu[o]).collect(),
            sigma: perm.iter().map(|&o| self.sigma[o]).collect(),
        }
    }
}

/// A probability distribution over hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDistribution {
    probs: Vec<f64>,
}

impl StateDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no states".into()));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidDistribution(format!("entry {p} not in [0, 1]")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > DIST_TOL {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize) -> Self {
        Self {
            probs: vec![1.0 / n_states as f64; n_states],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }
}

/// A row-stochastic transition matrix, `rows[i][j] = P(S_{t+1} = j | S_t = i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidDistribution("no rows".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidDistribution(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            let mut sum = 0.0;
            for &p in row {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidDistribution(format!(
                        "row {i} entry {p} not in [0, 1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > DIST_TOL {
                return Err(Error::InvalidDistribution(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { rows })
    }

    pub fn uniform(n_states: usize) -> Self {
        Self {
            rows: vec![vec![1.0 / n_states as f64; n_states]; n_states],
        }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.rows[from][to]
    }
}

/// A binned, variable-length observation sequence with a missing-bin mask.
///
/// Serializes as a plain array with `null` for missing bins.
#[derive(Debug, Clone)]
pub struct ObservedSequence {
    values: Vec<f64>,
    observed: Vec<bool>,
}

/// Missing bins hold NaN internally, so equality compares masks and only the
/// observed values.
impl PartialEq for ObservedSequence {
    fn eq(&self, other: &Self) -> bool {
        self.observed == other.observed
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.observed)
                .all(|((a, b), &obs)| !obs || a == b)
    }
}

impl ObservedSequence {
    /// Build from one optional value per bin (`None` = missing).
    pub fn new(bins: Vec<Option<f64>>) -> Result<Self> {
        let values: Vec<f64> = bins.iter().map(|b| b.unwrap_or(f64::NAN)).collect();
        let observed: Vec<bool> = bins.iter().map(|b| b.is_some()).collect();
        Self::from_parts(values, observed)
    }

    /// Build from parallel value/mask vectors. Values at missing bins are
    /// ignored (stored as NaN so accidental use is loud).
    pub fn from_parts(values: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySequence);
        }
        if values.len() > MAX_BINS {
            return Err(Error::SequenceTooLong {
                got: values.len(),
                max: MAX_BINS,
            });
        }
        if values.len() != observed.len() {
            return Err(Error::InvalidParameter(format!(
                "{} values but {} mask entries",
                values.len(),
                observed.len()
            )));
        }
        let mut values = values;
        for (t, v) in values.iter_mut().enumerate() {
            if observed[t] {
                if !v.is_finite() {
                    return Err(Error::NonFinite(t));
                }
            } else {
                *v = f64::NAN;
            }
        }
        Ok(Self { values, observed })
    }

    /// Fully observed sequence.
    pub fn dense(values: Vec<f64>) -> Result<Self> {
        let observed = vec![true; values.len()];
        Self::from_parts(values, observed)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length >= 1 by construction
    }

    /// Value at bin `t`, or `None` when the bin is missing.
    pub fn get(&self, t: usize) -> Option<f64> {
        if self.observed[t] {
            Some(self.values[t])
        } else {
            None
        }
    }

    pub fn is_observed(&self, t: usize) -> bool {
        self.observed[t]
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<f64>> + '_ {
        (0..self.len()).map(move |t| self.get(t))
    }

    /// The first `n_bins` bins (at least 1, at most the full length).
    pub fn prefix(&self, n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::EmptySequence);
        }
        let n = n_bins.min(self.len());
        Ok(Self {
            values: self.values[..n].to_vec(),
            observed: self.observed[..n].to_vec(),
        })
    }
}

impl Serialize for ObservedSequence {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let bins: Vec<Option<f64>> = self.iter().collect();
        bins.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ObservedSequence {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let bins = Vec::<Option<f64>>::deserialize(deserializer)?;
        ObservedSequence::new(bins).map_err(serde::de::Error::custom)
    }
}

/// Output of the scaled forward-backward pass.
///
/// `scaling[t]` holds Rabiner's `c_t` (the reciprocal of the step-`t` forward
/// mass), so `log_likelihood == -Σ_t ln(scaling[t])`.
#[derive(Debug, Clone)]
pub struct ForwardBackwardResult {
    pub log_likelihood: f64,
    /// `gamma[t][i] = P(S_t = i | O)`, T rows.
    pub gamma: Vec<Vec<f64>>,
    /// `xi[t][i][j] = P(S_t = i, S_{t+1} = j | O)`, T-1 entries.
    pub xi: Vec<Vec<Vec<f64>>>,
    pub scaling: Vec<f64>,
}

fn check_dims(
    init: &StateDistribution,
    trans: &TransitionMatrix,
    emit: &EmissionParams,
) -> Result<usize> {
    let k = init.n_states();
    if trans.n_states() != k || emit.n_states() != k {
        return Err(Error::InvalidParameter(format!(
            "state counts disagree: init {k}, trans {}, emit {}",
            trans.n_states(),
            emit.n_states()
        )));
    }
    Ok(k)
}

/// Emission factor for bin `t` and state `j`: the Gaussian density when the
/// bin is observed, 1 when it is missing.
fn emit_factor(seq: &ObservedSequence, emit: &EmissionParams, t: usize, j: usize) -> f64 {
    match seq.get(t) {
        Some(v) => emit.density(j, v),
        None => 1.0,
    }
}

/// Scaled forward pass. Returns the per-step normalizers `s_t` (forward mass
/// before scaling) and the final scaled forward vector.
fn forward_scaled(
    seq: &ObservedSequence,
    init: &StateDistribution,
    trans: &TransitionMatrix,
    emit: &EmissionParams,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let k = check_dims(init, trans, emit)?;
    let t_len = seq.len();
    let mut alpha = vec![vec![0.0; k]; t_len];
    let mut norms = vec![0.0; t_len];

    for j in 0..k {
        alpha[0][j] = init.probs()[j] * emit_factor(seq, emit, 0, j);
    }
    for t in 1..=t_len {
        let s: f64 = alpha[t - 1].iter().sum();
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::DegenerateLikelihood { t: t - 1 });
        }
        norms[t - 1] = s;
        for v in alpha[t - 1].iter_mut() {
            *v /= s;
        }
        if t == t_len {
            break;
        }
        for j in 0..k {
            let mut acc = 0.0;
            for i in 0..k {
                acc += alpha[t - 1][i] * trans.prob(i, j);
            }
            alpha[t][j] = acc * emit_factor(seq, emit, t, j);
        }
    }
    Ok((alpha, norms))
}

/// Log-likelihood `ln P(O | init, trans, emit)` via the scaled forward
/// recursion. Missing bins contribute emission factor 1.
pub fn sequence_log_likelihood(
    seq: &ObservedSequence,
    init: &StateDistribution,
    trans: &TransitionMatrix,
    emit: &EmissionParams,
) -> Result<f64> {
    let (_, norms) = forward_scaled(seq, init, trans, emit)?;
    Ok(norms.iter().map(|s| s.ln()).sum())
}

/// Full forward-backward pass: smoothed state posteriors (gamma), pairwise
/// posteriors (xi), scaling constants, and the log-likelihood.
pub fn forward_backward(
    seq: &ObservedSequence,
    init: &StateDistribution,
    trans: &TransitionMatrix,
    emit: &EmissionParams,
) -> Result<ForwardBackwardResult> {
    let (alpha, norms) = forward_scaled(seq, init, trans, emit)?;
    let k = init.n_states();
    let t_len = seq.len();

    // beta[t][i] is the backward variable divided by s_{t+1}..s_{T-1}, so
    // gamma comes out normalized as alpha[t] * beta[t] directly.
    let mut beta = vec![vec![1.0; k]; t_len];
    for t in (0..t_len - 1).rev() {
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..k {
                acc += trans.prob(i, j) * emit_factor(seq, emit, t + 1, j) * beta[t + 1][j];
            }
            beta[t][i] = acc / norms[t + 1];
        }
    }

    let mut gamma = vec![vec![0.0; k]; t_len];
    for t in 0..t_len {
        for i in 0..k {
            gamma[t][i] = alpha[t][i] * beta[t][i];
        }
    }

    let mut xi = vec![vec![vec![0.0; k]; k]; t_len.saturating_sub(1)];
    for t in 0..t_len.saturating_sub(1) {
        for i in 0..k {
            for j in 0..k {
                xi[t][i][j] = alpha[t][i]
                    * trans.prob(i, j)
                    * emit_factor(seq, emit, t + 1, j)
                    * beta[t + 1][j]
                    / norms[t + 1];
            }
        }
    }

    let log_likelihood = norms.iter().map(|s| s.ln()).sum();
    let scaling = norms.iter().map(|s| 1.0 / s).collect();
    Ok(ForwardBackwardResult {
        log_likelihood,
        gamma,
        xi,
        scaling,
    })
}

/// Most probable state path (log-space Viterbi). Ties break toward the lower
/// state index.
pub fn viterbi(
    seq: &ObservedSequence,
    init: &StateDistribution,
    trans: &TransitionMatrix,
    emit: &EmissionParams,
) -> Result<Vec<usize>> {
    let k = check_dims(init, trans, emit)?;
    let t_len = seq.len();

    let ln_factor = |t: usize, j: usize| -> f64 {
        match seq.get(t) {
            Some(v) => emit.ln_density(j, v),
            None => 0.0,
        }
    };

    let mut delta = vec![vec![f64::NEG_INFINITY; k]; t_len];
    let mut back = vec![vec![0usize; k]; t_len];
    for j in 0..k {
        delta[0][j] = init.probs()[j].ln() + ln_factor(0, j);
    }
    for t in 1..t_len {
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..k {
                let cand = delta[t - 1][i] + trans.prob(i, j).ln();
                if cand > best {
                    best = cand;
                    arg = i;
                }
            }
            delta[t][j] = best + ln_factor(t, j);
            back[t][j] = arg;
        }
    }

    let mut last = 0;
    let mut best = f64::NEG_INFINITY;
    for (j, &d) in delta[t_len - 1].iter().enumerate() {
        if d > best {
            best = d;
            last = j;
        }
    }
    let mut path = vec![0usize; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Table-style complication emissions used across the test suite.
    fn comp_emissions() -> EmissionParams {
        EmissionParams::new(
            vec![97.793, 98.582, 99.813],
            vec![0.434, 0.435, 1.092],
        )
        .unwrap()
    }

    fn gaussian(mu: f64, sigma: f64, x: f64) -> f64 {
        let z = (x - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Exhaustive path enumeration for short sequences; the independent
    /// oracle for likelihood, posteriors, and Viterbi.
    fn enumerate_paths(
        seq: &ObservedSequence,
        init: &StateDistribution,
        trans: &TransitionMatrix,
        emit: &EmissionParams,
    ) -> (f64, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, f64) {
        let k = init.n_states();
        let t_len = seq.len();
        let n_paths = k.pow(t_len as u32);
        let mut total = 0.0;
        let mut gamma = vec![vec![0.0; k]; t_len];
        let mut xi = vec![vec![vec![0.0; k]; k]; t_len.saturating_sub(1)];
        let mut best = f64::NEG_INFINITY;
        for code in 0..n_paths {
            let mut c = code;
            let path: Vec<usize> = (0..t_len)
                .map(|_| {
                    let s = c % k;
                    c /= k;
                    s
                })
                .collect();
            let mut p = init.probs()[path[0]] * emit_factor(seq, emit, 0, path[0]);
            for t in 1..t_len {
                p *= trans.prob(path[t - 1], path[t]) * emit_factor(seq, emit, t, path[t]);
            }
            total += p;
            for t in 0..t_len {
                gamma[t][path[t]] += p;
            }
            for t in 0..t_len - 1 {
                xi[t][path[t]][path[t + 1]] += p;
            }
            if p > best {
                best = p;
            }
        }
        for row in gamma.iter_mut().chain(xi.iter_mut().flatten()) {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        (total.ln(), gamma, xi, best.ln())
    }

    fn path_log_prob(
        path: &[usize],
        seq: &ObservedSequence,
        init: &StateDistribution,
        trans: &TransitionMatrix,
        emit: &EmissionParams,
    ) -> f64 {
        let mut lp = init.probs()[path[0]].ln() + emit_factor(seq, emit, 0, path[0]).ln();
        for t in 1..path.len() {
            lp += trans.prob(path[t - 1], path[t]).ln() + emit_factor(seq, emit, t, path[t]).ln();
        }
        lp
    }

    #[test]
    fn density_at_mean_is_peak_value() {
        let emit = comp_emissions();
        let d = emit.density(0, 97.793);
        let expected = 1.0 / (0.434 * (2.0 * std::f64::consts::PI).sqrt());
        assert_relative_eq!(d, expected, max_relative = 1e-12);
        assert_relative_eq!(d, 0.9192, max_relative = 1e-4);
    }

    #[test]
    fn density_matches_direct_formula() {
        let emit = comp_emissions();
        let d = emit.density(2, 98.0);
        assert_relative_eq!(d, gaussian(99.813, 1.092, 98.0), max_relative = 1e-12);
        assert_relative_eq!(d, 0.0921, max_relative = 2e-3);
    }

    #[test]
    fn density_is_symmetric_about_mean() {
        let emit = comp_emissions();
        for k in [0.5, 1.0, 2.7] {
            for state in 0..3 {
                let mu = emit.mu()[state];
                let sd = emit.sigma()[state];
                let lo = emit.density(state, mu - k * sd);
                let hi = emit.density(state, mu + k * sd);
                assert_relative_eq!(lo, hi, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn sigma_is_floored() {
        let emit = EmissionParams::new(vec![98.0], vec![0.0]).unwrap();
        assert_eq!(emit.sigma()[0], SIGMA_FLOOR);
    }

    #[test]
    fn single_bin_log_likelihood() {
        let emit = comp_emissions();
        let init = StateDistribution::uniform(3);
        let trans = TransitionMatrix::uniform(3);
        let seq = ObservedSequence::dense(vec![98.0]).unwrap();
        let ll = sequence_log_likelihood(&seq, &init, &trans, &emit).unwrap();
        let expected = ((emit.density(0, 98.0) + emit.density(1, 98.0) + emit.density(2, 98.0))
            / 3.0)
            .ln();
        assert_relative_eq!(ll, expected, max_relative = 1e-12);
        assert_relative_eq!(ll, -0.8462, max_relative = 1e-3);
    }

    #[test]
    fn trailing_missing_bin_adds_nothing() {
        let emit = comp_emissions();
        let init = StateDistribution::uniform(3);
        let trans = TransitionMatrix::new(vec![
            vec![0.7, 0.2, 0.1],
            vec![0.3, 0.5, 0.2],
            vec![0.25, 0.25, 0.5],
        ])
        .unwrap();
        let one = ObservedSequence::dense(vec![98.4]).unwrap();
        let two = ObservedSequence::new(vec![Some(98.4), None]).unwrap();
        let ll1 = sequence_log_likelihood(&one, &init, &trans, &emit).unwrap();
        let ll2 = sequence_log_likelihood(&two, &init, &trans, &emit).unwrap();
        assert_relative_eq!(ll1, ll2, epsilon = 1e-12);
    }

    #[test]
    fn three_bin_likelihood_matches_enumeration() {
        let emit = comp_emissions();
        let init = StateDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let trans = TransitionMatrix::new(vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.2, 0.7],
        ])
        .unwrap();
        let seq = ObservedSequence::dense(vec![98.1, 99.0, 100.2]).unwrap();
        let ll = sequence_log_likelihood(&seq, &init, &trans, &emit).unwrap();
        let (ll_brute, _, _, _) = enumerate_paths(&seq, &init, &trans, &emit);
        assert_relative_eq!(ll, ll_brute, max_relative = 1e-10);
    }

    #[test]
    fn forward_backward_single_bin() {
        let emit = comp_emissions();
        let init = StateDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let trans = TransitionMatrix::uniform(3);
        let seq = ObservedSequence::dense(vec![98.6]).unwrap();
        let fb = forward_backward(&seq, &init, &trans, &emit).unwrap();
        assert!(fb.xi.is_empty());
        let weights: Vec<f64> = (0..3)
            .map(|i| init.probs()[i] * emit.density(i, 98.6))
            .collect();
        let total: f64 = weights.iter().sum();
        for i in 0..3 {
            assert_relative_eq!(fb.gamma[0][i], weights[i] / total, max_relative = 1e-12);
        }
    }

    #[test]
    fn forward_backward_matches_enumeration() {
        let emit = comp_emissions();
        let init = StateDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let trans = TransitionMatrix::new(vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.2, 0.7],
        ])
        .unwrap();
        let seq = ObservedSequence::new(vec![Some(98.1), None, Some(99.9), Some(97.6)]).unwrap();
        let fb = forward_backward(&seq, &init, &trans, &emit).unwrap();
        let (ll, gamma, xi, _) = enumerate_paths(&seq, &init, &trans, &emit);
        assert_relative_eq!(fb.log_likelihood, ll, max_relative = 1e-10);
        for t in 0..seq.len() {
            for i in 0..3 {
                assert!((fb.gamma[t][i] - gamma[t][i]).abs() <= 1e-10);
            }
        }
        for t in 0..seq.len() - 1 {
            for i in 0..3 {
                for j in 0..3 {
                    assert!((fb.xi[t][i][j] - xi[t][i][j]).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn forward_backward_identities() {
        let emit = comp_emissions();
        let init = StateDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let trans = TransitionMatrix::new(vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.2, 0.7],
        ])
        .unwrap();
        let seq =
            ObservedSequence::new(vec![Some(98.1), None, Some(99.9), Some(97.6), Some(98.8)])
                .unwrap();
        let fb = forward_backward(&seq, &init, &trans, &emit).unwrap();
        for t in 0..seq.len() {
            let row: f64 = fb.gamma[t].iter().sum();
            assert!((row - 1.0).abs() <= 1e-9, "gamma row {t} sums to {row}");
        }
        for t in 0..seq.len() - 1 {
            for i in 0..3 {
                let xi_sum: f64 = fb.xi[t][i].iter().sum();
                assert!((xi_sum - fb.gamma[t][i]).abs() <= 1e-9);
            }
        }
        let from_scaling: f64 = -fb.scaling.iter().map(|c| c.ln()).sum::<f64>();
        assert_relative_eq!(fb.log_likelihood, from_scaling, epsilon = 1e-9);
        let ll = sequence_log_likelihood(&seq, &init, &trans, &emit).unwrap();
        assert_relative_eq!(fb.log_likelihood, ll, epsilon = 1e-12);
    }

    #[test]
    fn uninformative_emissions_reduce_gamma_to_chain_marginals() {
        // Identical emissions in every state: observations carry no
        // information, so gamma is the bare Markov-chain marginal.
        let emit = EmissionParams::new(vec![98.6; 3], vec![0.5; 3]).unwrap();
        let init = StateDistribution::new(vec![0.6, 0.3, 0.1]).unwrap();
        let trans = TransitionMatrix::new(vec![
            vec![0.7, 0.2, 0.1],
            vec![0.3, 0.5, 0.2],
            vec![0.25, 0.25, 0.5],
        ])
        .unwrap();
        let seq = ObservedSequence::dense(vec![98.0, 99.0, 100.0, 97.5]).unwrap();
        let fb = forward_backward(&seq, &init, &trans, &emit).unwrap();
        let mut marginal = init.probs().to_vec();
        for t in 0..seq.len() {
            for i in 0..3 {
                assert_relative_eq!(fb.gamma[t][i], marginal[i], epsilon = 1e-12);
            }
            let next: Vec<f64> = (0..3)
                .map(|j| (0..3).map(|i| marginal[i] * trans.prob(i, j)).sum())
                .collect();
            marginal = next;
        }
    }

    #[test]
    fn viterbi_single_bin_picks_best_weighted_state() {
        let emit = comp_emissions();
        let init = StateDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let trans = TransitionMatrix::uniform(3);
        let seq = ObservedSequence::dense(vec![98.6]).unwrap();
        let path = viterbi(&seq, &init, &trans, &emit).unwrap();
        let scores: Vec<f64> = (0..3)
            .map(|i| init.probs()[i] * emit.density(i, 98.6))
            .collect();
        let best = (0..3)
            .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
            .unwrap();
        assert_eq!(path, vec![best]);
    }

    #[test]
    fn viterbi_attains_enumerated_maximum() {
        let emit = comp_emissions();
        let init = StateDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let trans = TransitionMatrix::new(vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.2, 0.7],
        ])
        .unwrap();
        let seq = ObservedSequence::new(vec![Some(98.1), None, Some(99.9), Some(97.6)]).unwrap();
        let path = viterbi(&seq, &init, &trans, &emit).unwrap();
        let (_, _, _, best_lp) = enumerate_paths(&seq, &init, &trans, &emit);
        let lp = path_log_prob(&path, &seq, &init, &trans, &emit);
        assert_relative_eq!(lp, best_lp, max_relative = 1e-10);
    }

    #[test]
    fn viterbi_locks_onto_dominant_emission() {
        let emit =
            EmissionParams::new(vec![97.0, 98.5, 100.0], vec![0.3, 0.3, 0.3]).unwrap();
        let init = StateDistribution::uniform(3);
        let trans = TransitionMatrix::uniform(3);
        let seq = ObservedSequence::dense(vec![100.0; 8]).unwrap();
        let path = viterbi(&seq, &init, &trans, &emit).unwrap();
        assert_eq!(path, vec![2; 8]);
    }

    #[test]
    fn missing_bin_equals_unit_density_bin() {
        // With equal means everywhere and sigma = 1/sqrt(2*pi), the density
        // at the mean is exactly 1 in every state, so masking that bin must
        // not change any result.
        let sd = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let emit = EmissionParams::new(vec![98.6; 3], vec![sd; 3]).unwrap();
        let init = StateDistribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        let trans = TransitionMatrix::new(vec![
            vec![0.7, 0.2, 0.1],
            vec![0.3, 0.5, 0.2],
            vec![0.25, 0.25, 0.5],
        ])
        .unwrap();
        let with = ObservedSequence::new(vec![Some(98.6), Some(98.6), Some(98.6)]).unwrap();
        let without = ObservedSequence::new(vec![Some(98.6), None, Some(98.6)]).unwrap();
        let fb_with = forward_backward(&with, &init, &trans, &emit).unwrap();
        let fb_without = forward_backward(&without, &init, &trans, &emit).unwrap();
        assert_relative_eq!(
            fb_with.log_likelihood,
            fb_without.log_likelihood,
            epsilon = 1e-12
        );
        for t in 0..3 {
            for i in 0..3 {
                assert_relative_eq!(
                    fb_with.gamma[t][i],
                    fb_without.gamma[t][i],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn state_permutation_is_consistent() {
        let emit = comp_emissions();
        let init = StateDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let trans = TransitionMatrix::new(vec![
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.2, 0.7],
        ])
        .unwrap();
        let seq = ObservedSequence::dense(vec![98.1, 99.4, 100.0, 97.9]).unwrap();

        let perm = [2usize, 0, 1]; // perm[new] = old
        let p_init = StateDistribution::new(perm.iter().map(|&o| init.probs()[o]).collect())
            .unwrap();
        let p_trans = TransitionMatrix::new(
            perm.iter()
                .map(|&oi| perm.iter().map(|&oj| trans.prob(oi, oj)).collect())
                .collect(),
        )
        .unwrap();
        let p_emit = emit.permuted(&perm);

        let fb = forward_backward(&seq, &init, &trans, &emit).unwrap();
        let fb_p = forward_backward(&seq, &p_init, &p_trans, &p_emit).unwrap();
        assert_relative_eq!(fb.log_likelihood, fb_p.log_likelihood, epsilon = 1e-12);
        for t in 0..seq.len() {
            for (new, &old) in perm.iter().enumerate() {
                assert_relative_eq!(fb_p.gamma[t][new], fb.gamma[t][old], epsilon = 1e-12);
            }
        }
        let path = viterbi(&seq, &init, &trans, &emit).unwrap();
        let path_p = viterbi(&seq, &p_init, &p_trans, &p_emit).unwrap();
        let relabeled: Vec<usize> = path_p.iter().map(|&s| perm[s]).collect();
        assert_eq!(path, relabeled);
    }

    #[test]
    fn sequence_length_limits() {
        assert!(matches!(
            ObservedSequence::dense(vec![]),
            Err(Error::EmptySequence)
        ));
        assert!(matches!(
            ObservedSequence::dense(vec![98.6; MAX_BINS + 1]),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(ObservedSequence::dense(vec![98.6; MAX_BINS]).is_ok());
    }

    #[test]
    fn observed_bins_must_be_finite() {
        assert!(matches!(
            ObservedSequence::new(vec![Some(f64::NAN)]),
            Err(Error::NonFinite(0))
        ));
        assert!(ObservedSequence::new(vec![None, Some(98.6)]).is_ok());
    }

    #[test]
    fn sequence_json_round_trip() {
        let seq = ObservedSequence::new(vec![Some(98.1), None, Some(99.95)]).unwrap();
        let json = serde_json::to_string(&seq).unwrap();
        assert_eq!(json, "[98.1,null,99.95]");
        let back: ObservedSequence = serde_json::from_str(&json).unwrap();
        assert_eq!(seq, back);
    }
}
