//! Patient-clustered bootstrap intervals and permutation tests for AUC
//! differences.
//!
//! Every resample is expressed as a vector of integer sample weights over a
//! fixed sort order, so the observed statistic and the resampled statistics
//! come from the same arithmetic. Resample `b` draws from its own counter
//! stream, which makes results independent of the rayon pool size.

use crate::error::{Error, Result};
use crate::metric::{midranks, SortedScores};
use crate::models::OutcomeModel;
use crate::panel::PeriodView;
use crate::rng;
use crate::subpop::SubpopModel;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Maximum fraction of degenerate bootstrap resamples tolerated.
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
    pub iterations: usize,
    pub skipped: usize,
    pub point_estimate: f64,
    #[serde(skip)]
    pub replicates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p_value: f64,
    pub exceed_count: usize,
    pub permutations: usize,
    pub observed_diff: f64,
    #[serde(skip)]
    pub replicates: Vec<f64>,
}

pub fn permutation_p_value(exceed: usize, permutations: usize) -> f64 {
    (1 + exceed) as f64 / (1 + permutations) as f64
}

/// Percentile of sorted data with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Basic bootstrap interval `[2a - q_hi, 2a - q_lo]`.
pub fn basic_interval(a: f64, q_lo: f64, q_hi: f64) -> (f64, f64) {
    (2.0 * a - q_hi, 2.0 * a - q_lo)
}

/// One period's evaluation rows scored by two models.
#[derive(Debug, Clone)]
pub struct TwoModelData {
    /// Patient cluster of each row.
    pub patient: Vec<u32>,
    pub labels: Vec<bool>,
    pub region: Vec<bool>,
    pub prev: Vec<f64>,
    pub curr: Vec<f64>,
}

/// Rows from two periods scored by one model.
#[derive(Debug, Clone)]
pub struct TwoPeriodData {
    pub patient: Vec<u32>,
    /// True for rows from the later period.
    pub later: Vec<bool>,
    pub labels: Vec<bool>,
    pub region: Vec<bool>,
    pub scores: Vec<f64>,
}

/// Dense patient ids `0..k` in first-seen order.
fn compact(ids: impl IntoIterator<Item = usize>) -> (Vec<u32>, usize) {
    let mut map = BTreeMap::new();
    let mut out = Vec::new();
    for id in ids {
        let n = map.len() as u32;
        out.push(*map.entry(id).or_insert(n));
    }
    (out, map.len())
}

impl TwoModelData {
    pub fn from_view(view: &PeriodView<'_>, f_prev: &OutcomeModel, f_curr: &OutcomeModel, subpop: &SubpopModel) -> Self {
        let rows: Vec<(usize, &crate::panel::Sample)> = view
            .patients
            .iter()
            .flat_map(|p| p.samples.iter().map(move |s| (p.patient, s)))
            .collect();
        let (patient, _) = compact(rows.iter().map(|r| r.0));
        Self {
            patient,
            labels: rows.iter().map(|r| r.1.has_outcome()).collect(),
            region: rows.iter().map(|r| subpop.contains(r.1)).collect(),
            prev: rows.iter().map(|r| f_prev.predict_proba(r.1)).collect(),
            curr: rows.iter().map(|r| f_curr.predict_proba(r.1)).collect(),
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            region: self.region.iter().map(|r| !r).collect(),
            ..self.clone()
        }
    }

    fn n_patients(&self) -> usize {
        self.patient.iter().map(|&p| p as usize + 1).max().unwrap_or(0)
    }
}

impl TwoPeriodData {
    pub fn from_views(
        prev_view: &PeriodView<'_>,
        curr_view: &PeriodView<'_>,
        f_prev: &OutcomeModel,
        subpop: &SubpopModel,
    ) -> Self {
        let rows: Vec<(usize, bool, &crate::panel::Sample)> = prev_view
            .patients
            .iter()
            .flat_map(|p| p.samples.iter().map(move |s| (p.patient, false, s)))
            .chain(
                curr_view
                    .patients
                    .iter()
                    .flat_map(|p| p.samples.iter().map(move |s| (p.patient, true, s))),
            )
            .collect();
        let (patient, _) = compact(rows.iter().map(|r| r.0));
        Self {
            patient,
            later: rows.iter().map(|r| r.1).collect(),
            labels: rows.iter().map(|r| r.2.has_outcome()).collect(),
            region: rows.iter().map(|r| subpop.contains(r.2)).collect(),
            scores: rows.iter().map(|r| f_prev.predict_proba(r.2)).collect(),
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            region: self.region.iter().map(|r| !r).collect(),
            ..self.clone()
        }
    }

    fn n_patients(&self) -> usize {
        self.patient.iter().map(|&p| p as usize + 1).max().unwrap_or(0)
    }
}

/// Patients split by whether any of their rows is positive.
fn outcome_strata(patient: &[u32], labels: &[bool], n_patients: usize) -> (Vec<u32>, Vec<u32>) {
    let mut positive = vec![false; n_patients];
    for (&p, &l) in patient.iter().zip(labels) {
        positive[p as usize] |= l;
    }
    let (mut p0, mut p1) = (Vec::new(), Vec::new());
    for (p, &pos) in positive.iter().enumerate() {
        if pos {
            p1.push(p as u32);
        } else {
            p0.push(p as u32);
        }
    }
    (p0, p1)
}

/// Multiplicity of each patient in one stratified bootstrap draw.
pub fn draw_multiplicities(p0: &[u32], p1: &[u32], n_patients: usize, seed: u64, b: u64) -> Vec<u32> {
    let mut r = rng::stream(seed, b);
    let mut mult = vec![0u32; n_patients];
    for stratum in [p0, p1] {
        for _ in 0..stratum.len() {
            mult[stratum[r.random_range(0..stratum.len())] as usize] += 1;
        }
    }
    mult
}

/// Row roles after swapping: row `i` plays the "later" role iff its original
/// role differs from its patient's coin.
pub fn permuted_roles(patient: &[u32], later: &[bool], swaps: &[bool]) -> Vec<bool> {
    patient
        .iter()
        .zip(later)
        .map(|(&p, &l)| l != swaps[p as usize])
        .collect()
}

/// One fair coin per patient.
pub fn draw_swaps(n_patients: usize, seed: u64, b: u64) -> Vec<bool> {
    let mut r = rng::stream(seed, b);
    (0..n_patients).map(|_| r.random()).collect()
}

fn degenerate(n_pos: usize, n_neg: usize) -> Error {
    Error::UndefinedMetric { n_pos, n_neg }
}

fn region_counts(labels: &[bool], region: &[bool]) -> (usize, usize) {
    let mut pos = 0;
    let mut neg = 0;
    for (&l, &r) in labels.iter().zip(region) {
        if r {
            if l {
                pos += 1;
            } else {
                neg += 1;
            }
        }
    }
    (pos, neg)
}

fn finish_interval(a: f64, stats: Vec<Option<f64>>, confidence: f64) -> Result<ConfidenceInterval> {
    let iterations = stats.len();
    let mut valid: Vec<f64> = stats.into_iter().flatten().collect();
    let skipped = iterations - valid.len();
    if skipped as f64 > MAX_SKIPPED_FRACTION * iterations as f64 || valid.is_empty() {
        return Err(Error::UnstableBootstrap {
            skipped,
            total: iterations,
        });
    }
    let replicates = valid.clone();
    valid.sort_by(f64::total_cmp);
    let alpha = 1.0 - confidence;
    let (lower, upper) = basic_interval(a, percentile(&valid, alpha / 2.0), percentile(&valid, 1.0 - alpha / 2.0));
    Ok(ConfidenceInterval {
        lower,
        upper,
        confidence,
        iterations,
        skipped,
        point_estimate: a,
        replicates,
    })
}

/// Bootstrap interval for `AUC(curr) - AUC(prev)` on one dataset.
pub fn bootstrap_two_models(data: &TwoModelData, confidence: f64, iterations: usize, seed: u64) -> Result<ConfidenceInterval> {
    let n_patients = data.n_patients();
    let sp = SortedScores::new(&data.prev);
    let sc = SortedScores::new(&data.curr);
    let region = |i: usize| if data.region[i] { 1.0 } else { 0.0 };
    let a = match (sc.weighted_auc(&data.labels, region), sp.weighted_auc(&data.labels, region)) {
        (Some(c), Some(p)) => c - p,
        _ => {
            let (p, n) = region_counts(&data.labels, &data.region);
            return Err(degenerate(p, n));
        }
    };
    let (p0, p1) = outcome_strata(&data.patient, &data.labels, n_patients);
    let stats: Vec<Option<f64>> = (0..iterations as u64)
        .into_par_iter()
        .map(|b| {
            let mult = draw_multiplicities(&p0, &p1, n_patients, seed, b);
            let w = |i: usize| {
                if data.region[i] {
                    f64::from(mult[data.patient[i] as usize])
                } else {
                    0.0
                }
            };
            Some(sc.weighted_auc(&data.labels, w)? - sp.weighted_auc(&data.labels, w)?)
        })
        .collect();
    finish_interval(a, stats, confidence)
}

/// Bootstrap interval for `AUC_earlier(f) - AUC_later(f)`, resampling
/// patients jointly across both periods.
pub fn bootstrap_two_periods(data: &TwoPeriodData, confidence: f64, iterations: usize, seed: u64) -> Result<ConfidenceInterval> {
    let n_patients = data.n_patients();
    let sorted = SortedScores::new(&data.scores);
    let stat = |w: &dyn Fn(usize) -> f64| -> Option<f64> {
        let early = sorted.weighted_auc(&data.labels, |i| if data.later[i] { 0.0 } else { w(i) })?;
        let late = sorted.weighted_auc(&data.labels, |i| if data.later[i] { w(i) } else { 0.0 })?;
        Some(early - late)
    };
    let Some(a) = stat(&|i| if data.region[i] { 1.0 } else { 0.0 }) else {
        let (p, n) = region_counts(&data.labels, &data.region);
        return Err(degenerate(p, n));
    };
    let (p0, p1) = outcome_strata(&data.patient, &data.labels, n_patients);
    let stats: Vec<Option<f64>> = (0..iterations as u64)
        .into_par_iter()
        .map(|b| {
            let mult = draw_multiplicities(&p0, &p1, n_patients, seed, b);
            stat(&|i| {
                if data.region[i] {
                    f64::from(mult[data.patient[i] as usize])
                } else {
                    0.0
                }
            })
        })
        .collect();
    finish_interval(a, stats, confidence)
}

/// Permutation test of `AUC(curr) - AUC(prev)` where each patient's rank
/// vectors are swapped between the models as one block.
pub fn permutation_two_models(data: &TwoModelData, permutations: usize, seed: u64) -> Result<PermutationResult> {
    let n = data.labels.len();
    let n_patients = data.n_patients();
    // entries 0..n carry the previous model's ranks, n..2n the current one's
    let mut combined = midranks(&data.prev);
    combined.extend(midranks(&data.curr));
    let labels: Vec<bool> = data.labels.iter().chain(&data.labels).copied().collect();
    let sorted = SortedScores::new(&combined);
    let stat = |swap: &dyn Fn(usize) -> bool| -> Option<f64> {
        // the "current" role reads entry i+n unless swapped
        let curr = sorted.weighted_auc(&labels, |k| {
            let (i, from_curr) = if k < n { (k, false) } else { (k - n, true) };
            if data.region[i] && (from_curr != swap(i)) {
                1.0
            } else {
                0.0
            }
        })?;
        let prev = sorted.weighted_auc(&labels, |k| {
            let (i, from_curr) = if k < n { (k, false) } else { (k - n, true) };
            if data.region[i] && (from_curr == swap(i)) {
                1.0
            } else {
                0.0
            }
        })?;
        Some(curr - prev)
    };
    let Some(a) = stat(&|_| false) else {
        let (p, n) = region_counts(&data.labels, &data.region);
        return Err(degenerate(p, n));
    };
    let unswapped = vec![false; n];
    let stats: Vec<f64> = (0..permutations as u64)
        .into_par_iter()
        .map(|b| {
            let swaps = draw_swaps(n_patients, seed, b);
            let roles = permuted_roles(&data.patient, &unswapped, &swaps);
            stat(&|i| roles[i]).unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    Ok(finish_permutation(a, stats))
}

/// Permutation test of `AUC_earlier(f) - AUC_later(f)` where each patient's
/// full sample sets are swapped between the periods as one block.
pub fn permutation_two_periods(data: &TwoPeriodData, permutations: usize, seed: u64) -> Result<PermutationResult> {
    let n_patients = data.n_patients();
    let sorted = SortedScores::new(&data.scores);
    let stat = |later: &[bool]| -> Option<f64> {
        let early = sorted.weighted_auc(&data.labels, |i| if data.region[i] && !later[i] { 1.0 } else { 0.0 })?;
        let late = sorted.weighted_auc(&data.labels, |i| if data.region[i] && later[i] { 1.0 } else { 0.0 })?;
        Some(early - late)
    };
    let Some(a) = stat(&data.later) else {
        let (p, n) = region_counts(&data.labels, &data.region);
        return Err(degenerate(p, n));
    };
    let stats: Vec<f64> = (0..permutations as u64)
        .into_par_iter()
        .map(|b| {
            let swaps = draw_swaps(n_patients, seed, b);
            stat(&permuted_roles(&data.patient, &data.later, &swaps)).unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    Ok(finish_permutation(a, stats))
}

fn finish_permutation(a: f64, stats: Vec<f64>) -> PermutationResult {
    let exceed = stats.iter().filter(|&&s| s > a).count();
    PermutationResult {
        p_value: permutation_p_value(exceed, stats.len()),
        exceed_count: exceed,
        permutations: stats.len(),
        observed_diff: a,
        replicates: stats,
    }
}

pub fn bootstrap_ci_two_models(
    view: &PeriodView<'_>,
    f_prev: &OutcomeModel,
    f_curr: &OutcomeModel,
    subpop: &SubpopModel,
    confidence: f64,
    iterations: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    bootstrap_two_models(&TwoModelData::from_view(view, f_prev, f_curr, subpop), confidence, iterations, seed)
}

pub fn bootstrap_ci_one_model_two_datasets(
    prev_view: &PeriodView<'_>,
    curr_view: &PeriodView<'_>,
    f_prev: &OutcomeModel,
    subpop: &SubpopModel,
    confidence: f64,
    iterations: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    bootstrap_two_periods(
        &TwoPeriodData::from_views(prev_view, curr_view, f_prev, subpop),
        confidence,
        iterations,
        seed,
    )
}

pub fn permutation_test_two_models(
    view: &PeriodView<'_>,
    f_prev: &OutcomeModel,
    f_curr: &OutcomeModel,
    subpop: &SubpopModel,
    permutations: usize,
    seed: u64,
) -> Result<PermutationResult> {
    permutation_two_models(&TwoModelData::from_view(view, f_prev, f_curr, subpop), permutations, seed)
}

pub fn permutation_test_one_model_two_datasets(
    prev_view: &PeriodView<'_>,
    curr_view: &PeriodView<'_>,
    f_prev: &OutcomeModel,
    subpop: &SubpopModel,
    permutations: usize,
    seed: u64,
) -> Result<PermutationResult> {
    permutation_two_periods(
        &TwoPeriodData::from_views(prev_view, curr_view, f_prev, subpop),
        permutations,
        seed,
    )
}
