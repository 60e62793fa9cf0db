//! Evaluation: stratified cross-validation, classification metrics,
//! early-classification sweeps, and Viterbi state-prevalence tables.
//!
//! Folds train independent classifier pairs (oversampled training split,
//! one model per class, prior from the pre-oversampling counts) and score
//! their untouched test splits. The early-classification sweep reuses each
//! fold's full-length models and only truncates the test sequences, so one
//! training pass serves every horizon.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{posterior, ClassLabel, ClassifierPair};
use crate::error::{Error, Result};
use crate::hmm::{viterbi, BIN_HOURS};
use crate::ingest::{oversample, PatientSequence};
use crate::seeding::derive_seed;
use crate::train::{fit, HmmParams, TrainConfig};

/// Confusion counts with complication as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "tp")]
    pub true_pos: usize,
    #[serde(rename = "fp")]
    pub false_pos: usize,
    #[serde(rename = "tn")]
    pub true_neg: usize,
    #[serde(rename = "fn")]
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    fn add(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }
}

/// Geometric mean of sensitivity and specificity:
/// sqrt(TP/(TP+FN) · TN/(FP+TN)).
pub fn g_means(c: &ConfusionCounts) -> Result<f64> {
    let pos = c.true_pos + c.false_neg;
    let neg = c.false_pos + c.true_neg;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "g-means needs at least one item of each class".into(),
        ));
    }
    let sensitivity = c.true_pos as f64 / pos as f64;
    let specificity = c.true_neg as f64 / neg as f64;
    Ok((sensitivity * specificity).sqrt())
}

/// Harmonic mean of precision and recall, as 2TP/(2TP+FP+FN); 0 when TP = 0.
pub fn f_score(c: &ConfusionCounts) -> Result<f64> {
    let denom = 2 * c.true_pos + c.false_pos + c.false_neg;
    if denom == 0 {
        return Err(Error::UndefinedMetric(
            "f-score undefined with no positives anywhere".into(),
        ));
    }
    Ok(2.0 * c.true_pos as f64 / denom as f64)
}

/// Mann-Whitney AUC: P(score_C > score_NC) + ½·P(tie), via average ranks.
pub fn auc(scores: &[(f64, ClassLabel)]) -> Result<f64> {
    let n_pos = scores
        .iter()
        .filter(|(_, l)| *l == ClassLabel::Complication)
        .count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs at least one score from each class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.partial_cmp(&scores[b].0).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        // 1-based average rank of the tie group [i, j].
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if scores[idx].1 == ClassLabel::Complication {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Metrics from one evaluation pass over a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub f_score: f64,
    pub g_means: f64,
    pub confusion: ConfusionCounts,
    pub n_test: usize,
    /// Test sequences skipped because truncation left no observed bin.
    pub skipped: usize,
}

/// Stratified k-fold assignment over dataset indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Test indices per fold; the train split is the complement.
    pub test_folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Shuffle each class separately (seeded) and deal round-robin, so
    /// every fold's class ratio is within one patient of the global ratio.
    pub fn stratified(dataset: &[PatientSequence], k: usize, seed: u64) -> Result<Self> {
        if k < 2 || k > dataset.len() {
            return Err(Error::InvalidParameter(format!(
                "k = {k} with {} sequences",
                dataset.len()
            )));
        }
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, ps) in dataset.iter().enumerate() {
            match ps.label {
                Some(ClassLabel::Complication) => by_class[0].push(i),
                Some(ClassLabel::NonComplication) => by_class[1].push(i),
                None => return Err(Error::Unlabeled(ps.patient_id.clone())),
            }
        }
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut test_folds = vec![Vec::new(); k];
        for class in by_class.iter_mut() {
            class.shuffle(&mut rng);
            for (pos, &idx) in class.iter().enumerate() {
                test_folds[pos % k].push(idx);
            }
        }
        for fold in test_folds.iter_mut() {
            fold.sort_unstable();
        }
        Ok(Self { k, seed, test_folds })
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let in_test: std::collections::HashSet<usize> =
            self.test_folds[fold].iter().copied().collect();
        let total: usize = self.test_folds.iter().map(Vec::len).sum();
        (0..total).filter(|i| !in_test.contains(i)).collect()
    }
}

/// One trained fold: the classifier pair plus its test indices.
pub struct FoldModel {
    pub fold: usize,
    pub pair: ClassifierPair,
    pub test_indices: Vec<usize>,
}

/// Train one classifier pair per fold: oversample the training split, fit
/// each class, set the prior from pre-oversampling counts. Folds run in
/// parallel; seeds are derived per fold and class, so the result does not
/// depend on scheduling.
pub fn train_folds(
    dataset: &[PatientSequence],
    plan: &FoldPlan,
    config: &TrainConfig,
) -> Result<Vec<FoldModel>> {
    (0..plan.k)
        .into_par_iter()
        .map(|fold| {
            let train_idx = plan.train_indices(fold);
            let train: Vec<PatientSequence> =
                train_idx.iter().map(|&i| dataset[i].clone()).collect();
            let n_c = train
                .iter()
                .filter(|p| p.label == Some(ClassLabel::Complication))
                .count();
            let n_nc = train.len() - n_c;
            if n_c == 0 || n_nc == 0 {
                return Err(Error::SingleClassFold { fold });
            }
            let prior_c = n_c as f64 / train.len() as f64;

            let balanced = oversample(&train, derive_seed(config.seed, 1000 + fold as u64))?;
            let (c_set, nc_set): (Vec<PatientSequence>, Vec<PatientSequence>) = balanced
                .into_iter()
                .partition(|p| p.label == Some(ClassLabel::Complication));

            let config_c = TrainConfig {
                seed: derive_seed(config.seed, (fold * 2) as u64),
                ..config.clone()
            };
            let config_nc = TrainConfig {
                seed: derive_seed(config.seed, (fold * 2 + 1) as u64),
                ..config.clone()
            };
            let (lambda_c, _) = fit(&c_set, &config_c)?;
            let (lambda_nc, _) = fit(&nc_set, &config_nc)?;
            Ok(FoldModel {
                fold,
                pair: ClassifierPair::new(lambda_c, lambda_nc, prior_c)?,
                test_indices: plan.test_folds[fold].clone(),
            })
        })
        .collect()
}

const DECISION_THRESHOLD: f64 = 0.5;

/// Score one fold's test split, optionally truncating each sequence to
/// `floor(truncate_hours / 4)` bins first. Sequences whose truncated prefix
/// has no observed bin are skipped and counted.
fn evaluate_fold(
    model: &FoldModel,
    dataset: &[PatientSequence],
    truncate_hours: Option<f64>,
) -> Result<MetricsReport> {
    let max_bins = truncate_hours.map(|h| (h / BIN_HOURS).floor() as usize);
    let mut scores: Vec<(f64, ClassLabel)> = Vec::new();
    let mut confusion = ConfusionCounts {
        true_pos: 0,
        false_pos: 0,
        true_neg: 0,
        false_neg: 0,
    };
    let mut skipped = 0;
    for &idx in &model.test_indices {
        let ps = &dataset[idx];
        let label = ps
            .label
            .ok_or_else(|| Error::Unlabeled(ps.patient_id.clone()))?;
        let seq = match max_bins {
            Some(0) => {
                skipped += 1;
                continue;
            }
            Some(n) => ps.bins.prefix(n)?,
            None => ps.bins.clone(),
        };
        if seq.n_observed() == 0 {
            skipped += 1;
            continue;
        }
        let p = posterior(&seq, &ps.covariates, &model.pair)
            .map_err(|e| e.for_patient(&ps.patient_id))?;
        scores.push((p, label));
        let predicted_c = p >= DECISION_THRESHOLD;
        match (predicted_c, label) {
            (true, ClassLabel::Complication) => confusion.true_pos += 1,
            (true, ClassLabel::NonComplication) => confusion.false_pos += 1,
            (false, ClassLabel::NonComplication) => confusion.true_neg += 1,
            (false, ClassLabel::Complication) => confusion.false_neg += 1,
        }
    }
    Ok(MetricsReport {
        auc: auc(&scores)?,
        f_score: f_score(&confusion)?,
        g_means: g_means(&confusion)?,
        confusion,
        n_test: scores.len(),
        skipped,
    })
}

/// Cross-validation output: per-fold metrics plus the fold mean
/// (metrics averaged, counts summed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub per_fold: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

fn mean_report(per_fold: &[MetricsReport]) -> MetricsReport {
    let n = per_fold.len() as f64;
    let mut confusion = ConfusionCounts {
        true_pos: 0,
        false_pos: 0,
        true_neg: 0,
        false_neg: 0,
    };
    let mut n_test = 0;
    let mut skipped = 0;
    for r in per_fold {
        confusion.add(&r.confusion);
        n_test += r.n_test;
        skipped += r.skipped;
    }
    MetricsReport {
        auc: per_fold.iter().map(|r| r.auc).sum::<f64>() / n,
        f_score: per_fold.iter().map(|r| r.f_score).sum::<f64>() / n,
        g_means: per_fold.iter().map(|r| r.g_means).sum::<f64>() / n,
        confusion,
        n_test,
        skipped,
    }
}

/// Evaluate already-trained folds at one horizon.
pub fn evaluate_folds(
    models: &[FoldModel],
    dataset: &[PatientSequence],
    truncate_hours: Option<f64>,
) -> Result<CvReport> {
    let per_fold: Result<Vec<MetricsReport>> = models
        .iter()
        .map(|m| evaluate_fold(m, dataset, truncate_hours))
        .collect();
    let per_fold = per_fold?;
    let mean = mean_report(&per_fold);
    Ok(CvReport { per_fold, mean })
}

/// Full cross-validation: train every fold, then score its test split
/// (truncated to `truncate_hours` when given).
pub fn cross_validate(
    dataset: &[PatientSequence],
    plan: &FoldPlan,
    config: &TrainConfig,
    truncate_hours: Option<f64>,
) -> Result<CvReport> {
    let models = train_folds(dataset, plan, config)?;
    evaluate_folds(&models, dataset, truncate_hours)
}

/// One row of the early-classification table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyCurvePoint {
    pub hours: f64,
    pub auc: f64,
    pub f_score: f64,
    pub g_means: f64,
}

/// Evaluate the same trained folds at a list of truncation horizons.
/// Models are trained once on full-length sequences and reused.
pub fn early_curve(
    dataset: &[PatientSequence],
    plan: &FoldPlan,
    config: &TrainConfig,
    hours: &[f64],
) -> Result<Vec<EarlyCurvePoint>> {
    let models = train_folds(dataset, plan, config)?;
    hours
        .iter()
        .map(|&h| {
            let report = evaluate_folds(&models, dataset, Some(h))?;
            Ok(EarlyCurvePoint {
                hours: h,
                auc: report.mean.auc,
                f_score: report.mean.f_score,
                g_means: report.mean.g_means,
            })
        })
        .collect()
}

/// Default early-classification horizons: 24 h to 72 h in 4 h steps.
pub fn default_early_hours() -> Vec<f64> {
    (6..=18).map(|b| b as f64 * BIN_HOURS).collect()
}

/// Share of patients in each Viterbi-decoded state at each bin, over the
/// patients whose sequences extend that far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceRow {
    pub bin: usize,
    pub hours: f64,
    pub shares: Vec<f64>,
}

/// Viterbi-decode every sequence under its covariate-resolved chain and
/// tabulate per-bin state shares. Rows sum to 1.
pub fn state_prevalence(
    sequences: &[PatientSequence],
    params: &HmmParams,
) -> Result<Vec<PrevalenceRow>> {
    if sequences.is_empty() {
        return Err(Error::EmptySequence);
    }
    let k = params.n_states;
    let paths: Result<Vec<Vec<usize>>> = sequences
        .par_iter()
        .map(|ps| {
            let run = || -> Result<Vec<usize>> {
                let init = params.initial_distribution(&ps.covariates)?;
                let trans = params.transition_matrix(&ps.covariates)?;
                viterbi(&ps.bins, &init, &trans, &params.theta3)
            };
            run().map_err(|e| e.for_patient(&ps.patient_id))
        })
        .collect();
    let paths = paths?;
    let max_len = paths.iter().map(Vec::len).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(max_len);
    for bin in 0..max_len {
        let mut counts = vec![0usize; k];
        let mut denom = 0usize;
        for path in &paths {
            if let Some(&s) = path.get(bin) {
                counts[s] += 1;
                denom += 1;
            }
        }
        rows.push(PrevalenceRow {
            bin,
            hours: (bin + 1) as f64 * BIN_HOURS,
            shares: counts.iter().map(|&c| c as f64 / denom as f64).collect(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

/// Early-curve rows as CSV: `hours,auc,f_score,g_means`.
pub fn early_curve_csv(points: &[EarlyCurvePoint]) -> String {
    let mut out = String::from("hours,auc,f_score,g_means\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.hours, p.auc, p.f_score, p.g_means
        ));
    }
    out
}

/// Prevalence rows as CSV: `bin,hours,share_s1,...,share_sK`.
pub fn prevalence_csv(rows: &[PrevalenceRow]) -> String {
    let k = rows.first().map_or(0, |r| r.shares.len());
    let mut out = String::from("bin,hours");
    for j in 1..=k {
        out.push_str(&format!(",share_s{j}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.bin, r.hours));
        for s in &r.shares {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    out
}

/// Human-readable cross-validation report with aligned columns.
pub fn render_cv_text(report: &CvReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<6} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6} {:>6} {:>7} {:>8}\n",
        "fold", "auc", "f_score", "g_means", "tp", "fp", "tn", "fn", "n_test", "skipped"
    ));
    let mut line = |name: &str, r: &MetricsReport| {
        out.push_str(&format!(
            "{:<6} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6} {:>6} {:>6} {:>7} {:>8}\n",
            name,
            r.auc,
            r.f_score,
            r.g_means,
            r.confusion.true_pos,
            r.confusion.false_pos,
            r.confusion.true_neg,
            r.confusion.false_neg,
            r.n_test,
            r.skipped
        ));
    };
    for (i, r) in report.per_fold.iter().enumerate() {
        line(&i.to_string(), r);
    }
    line("mean", &report.mean);
    out
}
