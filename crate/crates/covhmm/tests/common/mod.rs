//! Shared test support: exhaustive path-enumeration oracle and randomized
//! model/sequence generators. The oracle is independent of the library's
//! recursions — it sums over every state path directly.

use covhmm::hmm::{EmissionParams, ObservedSequence, StateDistribution, TransitionMatrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct BruteForce {
    pub log_likelihood: f64,
    pub gamma: Vec<Vec<f64>>,
    pub xi: Vec<Vec<Vec<f64>>>,
    pub best_path_log_prob: f64,
}

fn emit_factor(seq: &ObservedSequence, emit: &EmissionParams, t: usize, j: usize) -> f64 {
    match seq.get(t) {
        Some(v) => emit.density(j, v),
        None => 1.0,
    }
}

/// Enumerate all K^T paths: total likelihood, smoothed posteriors, pairwise
/// posteriors, and the best path's log probability.
pub fn brute_force(
    seq: &ObservedSequence,
    init: &StateDistribution,
    trans: &TransitionMatrix,
    emit: &EmissionParams,
) -> BruteForce {
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
    for row in gamma.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    for mat in xi.iter_mut() {
        for row in mat.iter_mut() {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
    BruteForce {
        log_likelihood: total.ln(),
        gamma,
        xi,
        best_path_log_prob: best.ln(),
    }
}

/// Joint log probability of one concrete path.
pub fn path_log_prob(
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

/// Random probability vector via normalized exponentials (strictly positive).
pub fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> StateDistribution {
    let exps: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.5f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    StateDistribution::new(exps.iter().map(|e| e / total).collect()).unwrap()
}

pub fn random_transition(rng: &mut ChaCha8Rng, k: usize) -> TransitionMatrix {
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|_| random_distribution(rng, k).probs().to_vec())
        .collect();
    TransitionMatrix::new(rows).unwrap()
}

pub fn random_emissions(rng: &mut ChaCha8Rng, k: usize) -> EmissionParams {
    let mu: Vec<f64> = (0..k).map(|_| rng.random_range(96.5..101.5)).collect();
    let sigma: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.2)).collect();
    EmissionParams::new(mu, sigma).unwrap()
}

pub fn random_sequence(rng: &mut ChaCha8Rng, max_len: usize, missing_rate: f64) -> ObservedSequence {
    let t = rng.random_range(1..=max_len);
    let mut bins: Vec<Option<f64>> = (0..t)
        .map(|_| {
            if rng.random_range(0.0..1.0) < missing_rate {
                None
            } else {
                Some(rng.random_range(96.0..102.0))
            }
        })
        .collect();
    if bins.iter().all(Option::is_none) {
        bins[0] = Some(98.6);
    }
    ObservedSequence::new(bins).unwrap()
}
