//! Follow-up analyses for a detected shift: per-feature frequency changes,
//! coefficient sign changes, recalibration by stratum ratios and importance
//! weights for covariate-shift reweighting.

use crate::error::{Error, Result};
use crate::metric::auc;
use crate::models::logistic::{clamp_prob, objective, sigmoid, Design, LogisticParams, C_GRID};
use crate::models::OutcomeModel;
use crate::panel::{Sample, Vocabulary};
use crate::rng;
use crate::scan::benjamini_hochberg_mask;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Hypergeometric, Normal};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

/// Smallest expected cell count for which the chi-squared approximation is used.
pub const MIN_EXPECTED_COUNT: f64 = 5.0;

pub const WEIGHT_MIN: f64 = 0.01;
pub const WEIGHT_MAX: f64 = 10.0;

/// Validation AUC slack within which the sparsest period classifier is preferred.
pub const SPARSITY_AUC_SLACK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTest {
    /// Pearson statistic without continuity correction.
    pub statistic: f64,
    pub p_value: f64,
    /// Whether the p-value comes from Fisher's exact test because an expected
    /// count fell below [`MIN_EXPECTED_COUNT`].
    pub exact: bool,
}

/// Independence test on the 2x2 table `[[a, b], [c, d]]`.
pub fn chi_squared_2x2(table: [[u64; 2]; 2]) -> ContingencyTest {
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let n = rows[0] + rows[1];
    if rows.contains(&0) || cols.contains(&0) {
        return ContingencyTest {
            statistic: 0.0,
            p_value: 1.0,
            exact: false,
        };
    }
    let mut statistic = 0.0;
    let mut min_expected = f64::INFINITY;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] as f64 * cols[j] as f64 / n as f64;
            min_expected = min_expected.min(e);
            statistic += (table[i][j] as f64 - e).powi(2) / e;
        }
    }
    if min_expected < MIN_EXPECTED_COUNT {
        return ContingencyTest {
            statistic,
            p_value: fisher_exact(table),
            exact: true,
        };
    }
    let p_value = ChiSquared::new(1.0).expect("one degree of freedom").sf(statistic);
    ContingencyTest {
        statistic,
        p_value,
        exact: false,
    }
}

/// Two-sided Fisher exact p-value: the total probability of tables with the
/// observed margins that are no more likely than the observed one.
pub fn fisher_exact(table: [[u64; 2]; 2]) -> f64 {
    let row0 = table[0][0] + table[0][1];
    let col0 = table[0][0] + table[1][0];
    let n = row0 + table[1][0] + table[1][1];
    let h = Hypergeometric::new(n, col0, row0).expect("valid margins");
    let observed = h.pmf(table[0][0]);
    let lo = (row0 + col0).saturating_sub(n);
    let hi = row0.min(col0);
    let p: f64 = (lo..=hi).map(|k| h.pmf(k)).filter(|&q| q <= observed * (1.0 + 1e-7)).sum();
    p.min(1.0)
}

fn present(s: &Sample, j: u32) -> bool {
    s.value(j) != 0.0
}

fn presence_counts(samples: &[&Sample], d: usize) -> Vec<u64> {
    let mut c = vec![0u64; d];
    for s in samples {
        for &(j, v) in &s.features {
            if v != 0.0 && (j as usize) < d {
                c[j as usize] += 1;
            }
        }
    }
    c
}

/// L1-penalized logistic regression separating the current period (label 1)
/// from the previous period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodClassifier {
    pub params: LogisticParams,
    /// Inverse penalty strength: the objective is `C` times the summed log-loss
    /// plus the L1 norm of the coefficients.
    pub c: f64,
    pub validation_auc: f64,
    pub nonzero: Vec<u32>,
}

impl PeriodClassifier {
    /// `P(current period | x)`.
    pub fn predict(&self, sample: &Sample) -> f64 {
        self.params.predict(&sample.features)
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

const FISTA_TOL: f64 = 1e-6;

/// Accelerated proximal gradient with backtracking for the mean log-loss plus
/// `lambda ||beta||_1`; the intercept is unpenalized.
fn fista(design: &Design<'_>, lambda: f64, init: Vec<f64>) -> Vec<f64> {
    let d = design.n_features;
    let penalty = |t: &[f64]| lambda * t[..d].iter().map(|b| b.abs()).sum::<f64>();
    let mut grad = vec![0.0; d + 1];
    let mut x = init;
    let mut y = x.clone();
    let mut momentum: f64 = 1.0;
    let mut lipschitz: f64 = 1.0;
    let mut prev_total = f64::INFINITY;
    for _ in 0..3000 {
        let fy = objective(design, f64::INFINITY, &y, &mut grad);
        let mut scratch = vec![0.0; d + 1];
        let (z, fz) = loop {
            let step = 1.0 / lipschitz;
            let z: Vec<f64> = (0..=d)
                .map(|j| {
                    let v = y[j] - step * grad[j];
                    if j < d {
                        soft_threshold(v, lambda * step)
                    } else {
                        v
                    }
                })
                .collect();
            let fz = objective(design, f64::INFINITY, &z, &mut scratch);
            let diff: Vec<f64> = z.iter().zip(&y).map(|(a, b)| a - b).collect();
            let linear: f64 = diff.iter().zip(&grad).map(|(a, b)| a * b).sum();
            let quad: f64 = diff.iter().map(|a| a * a).sum::<f64>() * lipschitz / 2.0;
            if fz <= fy + linear + quad + 1e-12 || lipschitz > 1e12 {
                break (z, fz);
            }
            lipschitz *= 2.0;
        };
        let total = fz + penalty(&z);
        let change = z.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        if total > prev_total {
            // adaptive restart
            momentum = 1.0;
            y = x.clone();
            prev_total = f64::INFINITY;
            continue;
        }
        y = z
            .iter()
            .zip(&x)
            .map(|(a, b)| a + (momentum - 1.0) / next * (a - b))
            .collect();
        x = z;
        momentum = next;
        prev_total = total;
        if change < FISTA_TOL {
            break;
        }
    }
    x
}

/// Fit the period classifier over the penalty grid on a seeded 80/20 sample
/// split, keeping the sparsest fit whose validation AUC is within
/// [`SPARSITY_AUC_SLACK`] of the best.
pub fn fit_period_classifier(
    prev: &[&Sample],
    curr: &[&Sample],
    n_features: usize,
    seed: u64,
) -> Result<PeriodClassifier> {
    if prev.is_empty() || curr.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut all: Vec<(&Sample, bool)> = prev.iter().map(|s| (*s, false)).chain(curr.iter().map(|s| (*s, true))).collect();
    all.shuffle(&mut rng::rng(rng::derive(seed, "period-classifier")));
    let n_val = (all.len() / 5).max(1).min(all.len() - 1);
    let (val, train) = all.split_at(n_val);
    let design = Design {
        rows: train.iter().map(|(s, _)| s.features.as_slice()).collect(),
        labels: train.iter().map(|(_, y)| *y).collect(),
        weights: vec![1.0; train.len()],
        n_features,
    };
    let val_labels: Vec<bool> = val.iter().map(|(_, y)| *y).collect();
    let mut theta = vec![0.0; n_features + 1];
    let mut fits = Vec::new();
    for &c in &C_GRID {
        theta = fista(&design, 1.0 / (c * train.len() as f64), theta);
        let params = LogisticParams {
            coefficients: theta[..n_features].to_vec(),
            intercept: theta[n_features],
        };
        let scores: Vec<f64> = val.iter().map(|(s, _)| params.score(&s.features)).collect();
        let v = auc(&scores, &val_labels).map_or(0.5, |m| m.value);
        let nonzero: Vec<u32> = (0..n_features as u32).filter(|&j| params.coefficients[j as usize] != 0.0).collect();
        fits.push(PeriodClassifier {
            params,
            c,
            validation_auc: v,
            nonzero,
        });
    }
    let best = fits.iter().map(|f| f.validation_auc).fold(f64::NEG_INFINITY, f64::max);
    let chosen = fits
        .into_iter()
        .filter(|f| f.validation_auc >= best - SPARSITY_AUC_SLACK)
        .min_by_key(|f| f.nonzero.len())
        .expect("the best fit qualifies");
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateShiftFinding {
    pub feature_id: String,
    pub frequency_prev: f64,
    pub frequency_curr: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub exact_test: bool,
    pub bh_accepted: bool,
}

/// Per-feature frequency tests for the features the period classifier uses,
/// with BH at `alpha` over those features only.
pub fn univariate_shift_scan(
    prev: &[&Sample],
    curr: &[&Sample],
    vocabulary: &Vocabulary,
    alpha: f64,
    seed: u64,
) -> Result<Vec<UnivariateShiftFinding>> {
    let classifier = fit_period_classifier(prev, curr, vocabulary.len(), seed)?;
    Ok(frequency_tests(prev, curr, vocabulary, &classifier.nonzero, alpha))
}

/// Chi-squared frequency tests of the given features between two periods.
pub fn frequency_tests(
    prev: &[&Sample],
    curr: &[&Sample],
    vocabulary: &Vocabulary,
    features: &[u32],
    alpha: f64,
) -> Vec<UnivariateShiftFinding> {
    let d = vocabulary.len();
    let (cp, cc) = (presence_counts(prev, d), presence_counts(curr, d));
    let (np, nc) = (prev.len() as u64, curr.len() as u64);
    let mut findings: Vec<UnivariateShiftFinding> = features
        .par_iter()
        .map(|&j| {
            let (a, c) = (cp[j as usize], cc[j as usize]);
            let t = chi_squared_2x2([[a, np - a], [c, nc - c]]);
            UnivariateShiftFinding {
                feature_id: vocabulary.name(j).to_string(),
                frequency_prev: a as f64 / np.max(1) as f64,
                frequency_curr: c as f64 / nc.max(1) as f64,
                statistic: t.statistic,
                p_value: t.p_value,
                exact_test: t.exact,
                bh_accepted: false,
            }
        })
        .collect();
    let ps: Vec<f64> = findings.iter().map(|f| f.p_value).collect();
    for (f, r) in findings.iter_mut().zip(benjamini_hochberg_mask(&ps, alpha)) {
        f.bh_accepted = r;
    }
    findings
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientInterval {
    pub feature_id: String,
    pub period: i32,
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignFlipConfig {
    /// Features with the largest outcome chi-squared statistics kept per period.
    pub top_k: usize,
    /// Minimum number of samples with the feature in each period.
    pub min_count: u64,
    /// Correlation above which the less frequent of two features is dropped.
    pub max_correlation: f64,
    /// Largest count difference for which the correlation rule applies.
    pub count_tolerance: u64,
    pub confidence: f64,
    /// Features kept regardless of the selection rules.
    pub always_keep: Vec<String>,
    /// Add indicators for every prediction month except the first.
    pub month_indicators: bool,
}

impl Default for SignFlipConfig {
    fn default() -> Self {
        Self {
            top_k: 100,
            min_count: 100,
            max_correlation: 0.95,
            count_tolerance: 100,
            confidence: 0.95,
            always_keep: Vec::new(),
            month_indicators: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignFlipCandidate {
    pub feature_id: String,
    pub prev: CoefficientInterval,
    pub curr: CoefficientInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignFlipReport {
    pub selected_features: Vec<String>,
    /// Features removed because the information matrix was singular.
    pub dropped: Vec<String>,
    pub prev_intervals: Vec<CoefficientInterval>,
    pub curr_intervals: Vec<CoefficientInterval>,
    pub candidates: Vec<SignFlipCandidate>,
}

/// Features passing the outcome-association, frequency and correlation rules.
pub fn select_sign_flip_features(
    prev: &[&Sample],
    curr: &[&Sample],
    vocabulary: &Vocabulary,
    config: &SignFlipConfig,
) -> Result<Vec<u32>> {
    let d = vocabulary.len();
    let mut keep = BTreeSet::new();
    for name in &config.always_keep {
        keep.insert(
            vocabulary
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown feature {name}")))?,
        );
    }
    let counts = [presence_counts(prev, d), presence_counts(curr, d)];
    let mut candidates = BTreeSet::new();
    for samples in [prev, curr] {
        let n = samples.len() as u64;
        let n_pos = samples.iter().filter(|s| s.has_outcome()).count() as u64;
        let mut both = vec![0u64; d];
        let mut with = vec![0u64; d];
        for s in samples {
            for &(j, v) in &s.features {
                if v != 0.0 && (j as usize) < d {
                    with[j as usize] += 1;
                    if s.has_outcome() {
                        both[j as usize] += 1;
                    }
                }
            }
        }
        let mut stats: Vec<(f64, u32)> = (0..d)
            .into_par_iter()
            .map(|j| {
                let (a, b) = (both[j], with[j] - both[j]);
                let t = chi_squared_2x2([[a, b], [n_pos - a, n - n_pos - b]]);
                (t.statistic, j as u32)
            })
            .collect();
        stats.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        candidates.extend(stats.into_iter().take(config.top_k).map(|(_, j)| j));
    }
    let mut frequent: Vec<u32> = candidates
        .into_iter()
        .filter(|&j| !keep.contains(&j) && counts.iter().all(|c| c[j as usize] >= config.min_count))
        .collect();
    let total = |j: u32| counts[0][j as usize] + counts[1][j as usize];
    frequent.sort_by(|&a, &b| total(b).cmp(&total(a)).then(a.cmp(&b)));

    let index: BTreeMap<u32, usize> = frequent.iter().enumerate().map(|(k, &j)| (j, k)).collect();
    let m = frequent.len();
    let co = |samples: &[&Sample]| {
        let mut table = vec![0u64; m * m];
        for s in samples {
            let ks: Vec<usize> = s
                .features
                .iter()
                .filter(|(_, v)| *v != 0.0)
                .filter_map(|(j, _)| index.get(j).copied())
                .collect();
            for &a in &ks {
                for &b in &ks {
                    table[a * m + b] += 1;
                }
            }
        }
        table
    };
    let cooc = [co(prev), co(curr)];
    let mut kept: Vec<u32> = Vec::new();
    for (k, &j) in frequent.iter().enumerate() {
        let clash = kept.iter().any(|&i| {
            let ki = index[&i];
            (0..2).any(|p| {
                let n = if p == 0 { prev.len() } else { curr.len() } as f64;
                let (a, b) = (counts[p][i as usize], counts[p][j as usize]);
                let close = a.abs_diff(b) <= config.count_tolerance;
                let (a, b) = (a as f64, b as f64);
                let denom = (a * (n - a) * b * (n - b)).sqrt();
                let r = if denom > 0.0 {
                    (n * cooc[p][ki * m + k] as f64 - a * b) / denom
                } else {
                    0.0
                };
                close && r > config.max_correlation
            })
        });
        if !clash {
            kept.push(j);
        }
    }
    keep.extend(kept);
    Ok(keep.into_iter().collect())
}

/// Unpenalized logistic fit with the inverse observed information.
#[derive(Debug, Clone)]
pub struct LogisticMle {
    pub coefficients: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub converged: bool,
}

/// Gradient and observed information of the summed negative log-likelihood.
pub fn nll_gradient_and_information(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eta = x * beta;
    let p = eta.map(sigmoid);
    let grad = x.transpose() * (&p - y);
    let w = p.map(|q| q * (1.0 - q));
    let mut xw = x.clone();
    for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    (grad, x.transpose() * xw)
}

fn smallest_eigen(h: &DMatrix<f64>) -> (f64, DVector<f64>, f64) {
    let e = h.clone().symmetric_eigen();
    let (k, min) = e
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k, *v))
        .expect("nonempty");
    let max = e.eigenvalues.iter().copied().fold(0.0, f64::max);
    (min, e.eigenvectors.column(k).into_owned(), max)
}

/// Newton-Raphson fit. Returns `Err(column)` naming the column most involved
/// in a singular information matrix.
pub fn fit_logistic_mle(x: &DMatrix<f64>, y: &DVector<f64>) -> std::result::Result<LogisticMle, usize> {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    let nll = |b: &DVector<f64>| -> f64 {
        (x * b)
            .iter()
            .zip(y.iter())
            .map(|(&e, &yi)| {
                let q = clamp_prob(sigmoid(e));
                -(yi * q.ln() + (1.0 - yi) * (1.0 - q).ln())
            })
            .sum()
    };
    let mut converged = false;
    let mut current = nll(&beta);
    for _ in 0..100 {
        let (g, h) = nll_gradient_and_information(x, y, &beta);
        let Some(chol) = h.clone().cholesky() else {
            return Err(offending_column(&h));
        };
        let step = chol.solve(&g);
        let mut t = 1.0;
        let mut next = &beta - &step * t;
        let mut value = nll(&next);
        while value > current + 1e-12 && t > 1e-8 {
            t /= 2.0;
            next = &beta - &step * t;
            value = nll(&next);
        }
        let change = (&next - &beta).amax();
        beta = next;
        current = value;
        if change < 1e-10 {
            converged = true;
            break;
        }
    }
    let (_, h) = nll_gradient_and_information(x, y, &beta);
    let (min, _, max) = smallest_eigen(&h);
    if !(min > 1e-10 * max.max(1.0)) {
        return Err(offending_column(&h));
    }
    let covariance = h.try_inverse().ok_or_else(|| offending_column(&(x.transpose() * x)))?;
    Ok(LogisticMle {
        coefficients: beta,
        covariance,
        converged,
    })
}

fn offending_column(h: &DMatrix<f64>) -> usize {
    let (_, v, _) = smallest_eigen(h);
    // column 0 is the intercept and is never dropped
    (1..v.len())
        .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
        .unwrap_or(0)
}

struct PeriodFit {
    intervals: Vec<CoefficientInterval>,
}

fn dense_design(samples: &[&Sample], months: &[u8], features: &[u32]) -> (DMatrix<f64>, DVector<f64>) {
    let p = 1 + months.len() + features.len();
    let x = DMatrix::from_fn(samples.len(), p, |i, k| {
        let s = samples[i];
        if k == 0 {
            1.0
        } else if k <= months.len() {
            (s.month == months[k - 1]) as u8 as f64
        } else {
            present(s, features[k - 1 - months.len()]) as u8 as f64
        }
    });
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.outcome as f64));
    (x, y)
}

/// Per-period unpenalized fits on the selected features with 95% Wald
/// intervals; candidates are features whose intervals lie strictly on
/// opposite sides of zero in the two periods.
pub fn coefficient_sign_flip_candidates(
    prev: &[&Sample],
    curr: &[&Sample],
    vocabulary: &Vocabulary,
    config: &SignFlipConfig,
) -> Result<SignFlipReport> {
    if prev.is_empty() || curr.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(config.confidence > 0.0 && config.confidence < 1.0) {
        return Err(Error::InvalidArgument("confidence must lie in (0, 1)".into()));
    }
    let z = Normal::standard().inverse_cdf(0.5 + config.confidence / 2.0);
    let mut features = select_sign_flip_features(prev, curr, vocabulary, config)?;
    let months: Vec<u8> = if config.month_indicators {
        let seen: BTreeSet<u8> = prev.iter().chain(curr).map(|s| s.month).collect();
        seen.into_iter().skip(1).collect()
    } else {
        Vec::new()
    };
    let period_of = |s: &[&Sample]| s.iter().map(|x| x.period).max().unwrap_or(0);
    let mut dropped = Vec::new();
    let fits = loop {
        let attempt: std::result::Result<Vec<PeriodFit>, usize> = [prev, curr]
            .par_iter()
            .map(|samples| {
                let (x, y) = dense_design(samples, &months, &features);
                let mle = fit_logistic_mle(&x, &y)?;
                let offset = 1 + months.len();
                let intervals = features
                    .iter()
                    .enumerate()
                    .map(|(k, &j)| {
                        let est = mle.coefficients[offset + k];
                        let se = mle.covariance[(offset + k, offset + k)].sqrt();
                        CoefficientInterval {
                            feature_id: vocabulary.name(j).to_string(),
                            period: period_of(samples),
                            estimate: est,
                            std_error: se,
                            lower: est - z * se,
                            upper: est + z * se,
                        }
                    })
                    .collect();
                Ok(PeriodFit { intervals })
            })
            .collect();
        match attempt {
            Ok(f) => break f,
            Err(col) => {
                let offset = 1 + months.len();
                if col < offset {
                    return Err(Error::InvalidArgument(
                        "information matrix is singular in the month indicators".into(),
                    ));
                }
                let j = features.remove(col - offset);
                dropped.push(vocabulary.name(j).to_string());
            }
        }
    };
    let [prev_fit, curr_fit]: [PeriodFit; 2] = fits.try_into().map_err(|_| Error::EmptyDataset)?;
    let candidates = prev_fit
        .intervals
        .iter()
        .zip(&curr_fit.intervals)
        .filter(|(a, b)| (a.lower > 0.0 && b.upper < 0.0) || (a.upper < 0.0 && b.lower > 0.0))
        .map(|(a, b)| SignFlipCandidate {
            feature_id: a.feature_id.clone(),
            prev: a.clone(),
            curr: b.clone(),
        })
        .collect();
    Ok(SignFlipReport {
        selected_features: features.iter().map(|&j| vocabulary.name(j).to_string()).collect(),
        dropped,
        prev_intervals: prev_fit.intervals,
        curr_intervals: curr_fit.intervals,
        candidates,
    })
}

/// A feature-value conjunction and the multiplier applied to predictions of
/// samples that satisfy it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stratum {
    pub when: BTreeMap<String, f64>,
    pub ratio: f64,
}

/// Ordered strata; the first match applies and unmatched samples keep ratio 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumRatios {
    pub strata: Vec<Stratum>,
}

impl StratumRatios {
    pub fn validate(&self, vocabulary: &Vocabulary) -> Result<()> {
        for s in &self.strata {
            if !(s.ratio > 0.0 && s.ratio.is_finite()) {
                return Err(Error::InvalidArgument(format!("ratio {} must be positive and finite", s.ratio)));
            }
            if let Some(name) = s.when.keys().find(|n| vocabulary.get(n).is_none()) {
                return Err(Error::InvalidArgument(format!("unknown feature {name} in stratum")));
            }
        }
        Ok(())
    }

    pub fn ratio(&self, sample: &Sample, vocabulary: &Vocabulary) -> f64 {
        self.strata
            .iter()
            .find(|s| {
                s.when
                    .iter()
                    .all(|(name, &v)| vocabulary.get(name).map_or(0.0, |j| sample.value(j)) == v)
            })
            .map_or(1.0, |s| s.ratio)
    }

    pub fn load(path: impl AsRef<Path>, vocabulary: &Vocabulary) -> Result<Self> {
        let r: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        r.validate(vocabulary)?;
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Previous-period prediction rescaled by the sample's stratum ratio and
/// clipped to 1.
pub fn recalibrate_conditional(f_prev: &OutcomeModel, ratios: &StratumRatios, sample: &Sample, vocabulary: &Vocabulary) -> f64 {
    recalibrate_probability(f_prev.predict_proba(sample), ratios.ratio(sample, vocabulary))
}

pub fn recalibrate_probability(p: f64, ratio: f64) -> f64 {
    (p * ratio).clamp(0.0, 1.0)
}

/// Stratum ratios `P_t(Y | C) / P_{t-1}(Y | C)` for every combination of the
/// binary `features` observed with outcomes in both periods.
pub fn estimate_stratum_ratios(
    prev: &[&Sample],
    curr: &[&Sample],
    features: &[String],
    vocabulary: &Vocabulary,
) -> Result<StratumRatios> {
    let ids: Vec<u32> = features
        .iter()
        .map(|n| {
            vocabulary
                .get(n)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown feature {n}")))
        })
        .collect::<Result<_>>()?;
    let key = |s: &Sample| -> Vec<bool> { ids.iter().map(|&j| present(s, j)).collect() };
    let rates = |samples: &[&Sample]| {
        let mut m: BTreeMap<Vec<bool>, (u64, u64)> = BTreeMap::new();
        for s in samples {
            let e = m.entry(key(s)).or_default();
            e.0 += s.has_outcome() as u64;
            e.1 += 1;
        }
        m
    };
    let (rp, rc) = (rates(prev), rates(curr));
    let strata = rp
        .iter()
        .filter_map(|(k, &(pos_p, n_p))| {
            let &(pos_c, n_c) = rc.get(k)?;
            (pos_p > 0 && pos_c > 0).then(|| Stratum {
                when: features.iter().cloned().zip(k.iter().map(|&b| b as u8 as f64)).collect(),
                ratio: (pos_c as f64 / n_c as f64) / (pos_p as f64 / n_p as f64),
            })
        })
        .collect();
    Ok(StratumRatios { strata })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub weights: Vec<f64>,
}

/// Covariate-shift weights `n0 P(t = 1 | x) / (n1 P(t = 0 | x))` for
/// previous-period samples, clipped to `[WEIGHT_MIN, WEIGHT_MAX]`. `n0` and
/// `n1` are the previous and current sample counts the classifier was fit on.
pub fn importance_weights(scores: &[f64], n0: usize, n1: usize) -> Result<ImportanceWeights> {
    if n0 == 0 || n1 == 0 {
        return Err(Error::InvalidArgument("period sample counts must be positive".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores must be numbers".into()));
    }
    let weights = scores
        .iter()
        .map(|&p| {
            let p = clamp_prob(p);
            (n0 as f64 * p / (n1 as f64 * (1.0 - p))).clamp(WEIGHT_MIN, WEIGHT_MAX)
        })
        .collect();
    Ok(ImportanceWeights { weights })
}

pub fn write_findings_table(findings: &[UnivariateShiftFinding], mut w: impl Write) -> Result<()> {
    writeln!(w, "feature_id\tfrequency_prev\tfrequency_curr\tstatistic\tp_value\texact_test\tbh_accepted")?;
    for f in findings {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            f.feature_id, f.frequency_prev, f.frequency_curr, f.statistic, f.p_value, f.exact_test, f.bh_accepted
        )?;
    }
    Ok(())
}

pub fn write_intervals_table(report: &SignFlipReport, mut w: impl Write) -> Result<()> {
    let flagged: BTreeSet<&str> = report.candidates.iter().map(|c| c.feature_id.as_str()).collect();
    writeln!(w, "feature_id\tperiod\testimate\tstd_error\tlower\tupper\tsign_flip")?;
    for c in report.prev_intervals.iter().chain(&report.curr_intervals) {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.feature_id,
            c.period,
            c.estimate,
            c.std_error,
            c.lower,
            c.upper,
            flagged.contains(c.feature_id.as_str())
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn chi_squared_hand_fixture() {
        let t = chi_squared_2x2([[30, 70], [10, 90]]);
        assert!((t.statistic - 12.5).abs() < 1e-12);
        assert!(!t.exact);
        let identical = chi_squared_2x2([[30, 70], [30, 70]]);
        assert_eq!(identical.statistic, 0.0);
        assert!((identical.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_expected_counts_use_fisher() {
        let t = chi_squared_2x2([[3, 1], [1, 3]]);
        assert!(t.exact);
        // hypergeometric(8, 4, 4) masses: 1, 16, 36, 16, 1 over 70
        assert!((t.p_value - 34.0 / 70.0).abs() < 1e-12);
        let tea = fisher_exact([[4, 0], [0, 4]]);
        assert!((tea - 2.0 / 70.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn chi_squared_matches_direct_formula(a in 5u64..200, b in 5u64..200, c in 5u64..200, d in 5u64..200) {
            let n = (a + b + c + d) as f64;
            let (r0, r1, c0, c1) = ((a + b) as f64, (c + d) as f64, (a + c) as f64, (b + d) as f64);
            let direct = [(a, r0, c0), (b, r0, c1), (c, r1, c0), (d, r1, c1)]
                .iter()
                .map(|&(o, r, k)| { let e = r * k / n; (o as f64 - e).powi(2) / e })
                .sum::<f64>();
            let t = chi_squared_2x2([[a, b], [c, d]]);
            prop_assert!((t.statistic - direct).abs() <= 1e-9 * direct.max(1.0));
            prop_assert!(t.statistic >= 0.0);
            prop_assert!((0.0..=1.0).contains(&t.p_value));
        }

        #[test]
        fn weights_stay_in_bounds(scores in prop::collection::vec(0.0f64..=1.0, 1..50), n0 in 1usize..1000, n1 in 1usize..1000) {
            let w = importance_weights(&scores, n0, n1).unwrap();
            prop_assert!(w.weights.iter().all(|&x| (WEIGHT_MIN..=WEIGHT_MAX).contains(&x)));
        }

        #[test]
        fn recalibrated_probabilities_stay_in_unit_interval(p in 0.0f64..=1.0, ratio in 1e-6f64..1e6) {
            let q = recalibrate_probability(p, ratio);
            prop_assert!((0.0..=1.0).contains(&q));
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(importance_weights(&[0.5], 100, 100).unwrap().weights, vec![1.0]);
        // 25 before clipping
        let w = importance_weights(&[25.0 / 26.0], 1, 1).unwrap();
        assert_eq!(w.weights, vec![WEIGHT_MAX]);
        let w = importance_weights(&[1e-6], 1, 1).unwrap();
        assert_eq!(w.weights, vec![WEIGHT_MIN]);
        assert!(importance_weights(&[0.5], 0, 1).is_err());
    }

    fn vocab(d: usize) -> Vocabulary {
        Vocabulary::new((0..d).map(|j| format!("x{j}")).collect()).unwrap()
    }

    #[test]
    fn recalibration_examples() {
        let v = vocab(2);
        let ratios = StratumRatios {
            strata: vec![Stratum {
                when: BTreeMap::from([("x1".to_string(), 1.0)]),
                ratio: 3.43,
            }],
        };
        let model = OutcomeModel::constant(0.4, &v, 2019);
        let inside = Sample::new(2020, 1, vec![(1, 1.0)], 0);
        let outside = Sample::new(2020, 1, vec![(0, 1.0)], 0);
        assert_eq!(recalibrate_conditional(&model, &ratios, &inside, &v), 1.0);
        assert!((recalibrate_conditional(&model, &ratios, &outside, &v) - 0.4).abs() < 1e-12);
        let identity = StratumRatios::default();
        assert!((recalibrate_conditional(&model, &identity, &inside, &v) - 0.4).abs() < 1e-12);
        let bad = StratumRatios {
            strata: vec![Stratum {
                when: BTreeMap::from([("nope".to_string(), 1.0)]),
                ratio: 2.0,
            }],
        };
        assert!(bad.validate(&v).is_err());
        let zero = StratumRatios {
            strata: vec![Stratum {
                when: BTreeMap::new(),
                ratio: 0.0,
            }],
        };
        assert!(zero.validate(&v).is_err());
    }

    #[test]
    fn ratio_file_round_trip() {
        let v = vocab(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratios.json");
        std::fs::write(&path, r#"{"strata": [{"when": {"x0": 1}, "ratio": 0.23}]}"#).unwrap();
        let r = StratumRatios::load(&path, &v).unwrap();
        assert_eq!(r.strata[0].ratio, 0.23);
        assert!(std::fs::write(&path, r#"{"strata": [], "extra": 1}"#).is_ok());
        assert!(StratumRatios::load(&path, &v).is_err());
    }

    #[test]
    fn estimated_ratios_match_rates() {
        let v = vocab(1);
        let mk = |x: bool, y: u8| Sample::new(1, 1, if x { vec![(0, 1.0)] } else { vec![] }, y);
        let prev: Vec<Sample> = (0..100).map(|i| mk(i < 50, (i % 10 == 0) as u8)).collect();
        let curr: Vec<Sample> = (0..100).map(|i| mk(i < 50, (i % 5 == 0) as u8)).collect();
        let pr: Vec<&Sample> = prev.iter().collect();
        let cr: Vec<&Sample> = curr.iter().collect();
        let r = estimate_stratum_ratios(&pr, &cr, &["x0".to_string()], &v).unwrap();
        assert_eq!(r.strata.len(), 2);
        for s in &r.strata {
            assert!((s.ratio - 2.0).abs() < 1e-12);
        }
    }

    fn logistic_data(n: usize, beta: &[f64], intercept: f64, freq: f64, seed: u64, period: i32) -> Vec<Sample> {
        let mut r = rng::rng(seed);
        (0..n)
            .map(|_| {
                let mut feats = Vec::new();
                let mut z = intercept;
                for (j, b) in beta.iter().enumerate() {
                    if r.random::<f64>() < freq {
                        feats.push((j as u32, 1.0));
                        z += b;
                    }
                }
                let y = (r.random::<f64>() < sigmoid(z)) as u8;
                Sample::new(period, 1, feats, y)
            })
            .collect()
    }

    #[test]
    fn wald_errors_match_finite_difference_hessian() {
        let data = logistic_data(3000, &[0.8, -0.5, 0.3, 0.0, 1.2], -1.0, 0.3, 5, 1);
        let refs: Vec<&Sample> = data.iter().collect();
        let feats: Vec<u32> = (0..5).collect();
        let (x, y) = dense_design(&refs, &[], &feats);
        let mle = fit_logistic_mle(&x, &y).unwrap();
        assert!(mle.converged);
        let p = x.ncols();
        let h = 1e-5;
        let mut hess = DMatrix::zeros(p, p);
        for k in 0..p {
            let mut up = mle.coefficients.clone();
            let mut down = mle.coefficients.clone();
            up[k] += h;
            down[k] -= h;
            let (gu, _) = nll_gradient_and_information(&x, &y, &up);
            let (gd, _) = nll_gradient_and_information(&x, &y, &down);
            hess.set_column(k, &((gu - gd) / (2.0 * h)));
        }
        let cov = hess.try_inverse().unwrap();
        for k in 0..p {
            let (a, b) = (mle.covariance[(k, k)].sqrt(), cov[(k, k)].sqrt());
            assert!((a - b).abs() / b < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn singular_design_names_duplicate_column() {
        let data = logistic_data(500, &[0.5, 0.5], 0.0, 0.4, 2, 1);
        let refs: Vec<&Sample> = data.iter().collect();
        // feature 0 listed twice gives two identical columns
        let (x, y) = dense_design(&refs, &[], &[0, 1, 0]);
        let col = fit_logistic_mle(&x, &y).unwrap_err();
        assert!(col == 1 || col == 3);
    }

    fn flip_fixture(flip: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
        let prev = logistic_data(20_000, &[1.5, 0.5, -0.5, 0.3, 0.0], -2.0, 0.3, seed, 2018);
        let curr = logistic_data(20_000, &[flip, 0.5, -0.5, 0.3, 0.0], -2.0, 0.3, seed + 1, 2019);
        (prev, curr)
    }

    #[test]
    fn planted_sign_flip_is_flagged() {
        let v = vocab(5);
        let (prev, curr) = flip_fixture(-1.5, 11);
        let pr: Vec<&Sample> = prev.iter().collect();
        let cr: Vec<&Sample> = curr.iter().collect();
        let report = coefficient_sign_flip_candidates(&pr, &cr, &v, &SignFlipConfig::default()).unwrap();
        let flagged: Vec<&str> = report.candidates.iter().map(|c| c.feature_id.as_str()).collect();
        assert_eq!(flagged, vec!["x0"]);
        for c in report.prev_intervals.iter().chain(&report.curr_intervals) {
            assert!(c.lower <= c.estimate && c.estimate <= c.upper);
        }
    }

    #[test]
    fn stable_coefficients_are_not_flagged() {
        let v = vocab(5);
        let (prev, curr) = flip_fixture(1.5, 13);
        let pr: Vec<&Sample> = prev.iter().collect();
        let cr: Vec<&Sample> = curr.iter().collect();
        let report = coefficient_sign_flip_candidates(&pr, &cr, &v, &SignFlipConfig::default()).unwrap();
        assert!(report.candidates.is_empty());
    }

    #[test]
    fn selection_drops_rare_and_duplicate_features() {
        let v = vocab(4);
        let mut r = rng::rng(3);
        let mk = |r: &mut rand_chacha::ChaCha8Rng, period| {
            (0..2000)
                .map(|_| {
                    let a = r.random::<f64>() < 0.3;
                    let rare = r.random::<f64>() < 0.01;
                    let b = r.random::<f64>() < 0.4;
                    let mut f = Vec::new();
                    if a {
                        // x0 and x1 always co-occur
                        f.push((0, 1.0));
                        f.push((1, 1.0));
                    }
                    if rare {
                        f.push((2, 1.0));
                    }
                    if b {
                        f.push((3, 1.0));
                    }
                    let y = (r.random::<f64>() < if a { 0.4 } else { 0.1 }) as u8;
                    Sample::new(period, 1, f, y)
                })
                .collect::<Vec<_>>()
        };
        let prev = mk(&mut r, 1);
        let curr = mk(&mut r, 2);
        let pr: Vec<&Sample> = prev.iter().collect();
        let cr: Vec<&Sample> = curr.iter().collect();
        let kept = select_sign_flip_features(&pr, &cr, &v, &SignFlipConfig::default()).unwrap();
        assert_eq!(kept, vec![0, 3]);
    }

    fn shifted_features(n: usize, shifted: &[usize], d: usize, seed: u64, period: i32, drop: bool) -> Vec<Sample> {
        let mut r = rng::rng(seed);
        let base: Vec<f64> = (0..d).map(|j| 0.1 + 0.3 * ((j * 7919) % 100) as f64 / 100.0).collect();
        (0..n)
            .map(|_| {
                let f = (0..d)
                    .filter(|&j| {
                        let q = if drop && shifted.contains(&j) { base[j] * 0.5 } else { base[j] };
                        r.random::<f64>() < q
                    })
                    .map(|j| (j as u32, 1.0))
                    .collect();
                Sample::new(period, 1, f, 0)
            })
            .collect()
    }

    #[test]
    fn univariate_scan_finds_planted_drops() {
        let d = 30;
        let v = vocab(d);
        let planted = [2, 9, 17];
        let prev = shifted_features(4000, &planted, d, 1, 2019, false);
        let curr = shifted_features(4000, &planted, d, 2, 2020, true);
        let pr: Vec<&Sample> = prev.iter().collect();
        let cr: Vec<&Sample> = curr.iter().collect();
        let findings = univariate_shift_scan(&pr, &cr, &v, 0.05, 0).unwrap();
        let accepted: BTreeSet<String> = findings.iter().filter(|f| f.bh_accepted).map(|f| f.feature_id.clone()).collect();
        let expected: BTreeSet<String> = planted.iter().map(|j| format!("x{j}")).collect();
        assert_eq!(accepted, expected);
        for f in &findings {
            assert!(f.statistic >= 0.0 && (0.0..=1.0).contains(&f.frequency_prev));
        }
    }

    #[test]
    fn period_classifier_is_sparse_without_shift() {
        let d = 10;
        let prev = shifted_features(3000, &[], d, 4, 1, false);
        let curr = shifted_features(3000, &[], d, 5, 2, false);
        let pr: Vec<&Sample> = prev.iter().collect();
        let cr: Vec<&Sample> = curr.iter().collect();
        let c = fit_period_classifier(&pr, &cr, d, 0).unwrap();
        assert!(c.nonzero.len() <= 2, "{:?}", c.nonzero);
    }

    #[test]
    fn fista_matches_newton_without_penalty() {
        let data = logistic_data(2000, &[0.8, -0.5, 0.3], -1.0, 0.3, 9, 1);
        let design = Design {
            rows: data.iter().map(|s| s.features.as_slice()).collect(),
            labels: data.iter().map(|s| s.has_outcome()).collect(),
            weights: vec![1.0; data.len()],
            n_features: 3,
        };
        let a = fista(&design, 0.0, vec![0.0; 4]);
        let refs: Vec<&Sample> = data.iter().collect();
        let (x, y) = dense_design(&refs, &[], &[0, 1, 2]);
        let b = fit_logistic_mle(&x, &y).unwrap();
        for j in 0..3 {
            assert!((a[j] - b.coefficients[j + 1]).abs() < 1e-5, "{a:?} {}", b.coefficients);
        }
        assert!((a[3] - b.coefficients[0]).abs() < 1e-5);
    }
}
