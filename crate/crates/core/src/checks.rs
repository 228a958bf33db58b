//! Screening gates run on validation data before a test-set hypothesis test.
//!
//! Each report carries the quantities its decision was based on, and
//! [`CheckReport::evaluate`] recomputes the decision from those alone.

use crate::models::OutcomeModel;
use crate::panel::PeriodView;
use crate::resampling::{bootstrap_two_models, bootstrap_two_periods, ConfidenceInterval, TwoModelData, TwoPeriodData};
use crate::rng;
use crate::subpop::{auc_within, SubpopModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    SampleSize,
    ModelFit,
    PerformanceComparison,
    BaselineComparison,
}

impl CheckKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::SampleSize => "sample_size",
            CheckKind::ModelFit => "model_fit",
            CheckKind::PerformanceComparison => "performance_comparison",
            CheckKind::BaselineComparison => "baseline_comparison",
        }
    }
}

/// Patient-distinct counts inside and outside a region for one period.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub with_outcome_inside: usize,
    pub without_outcome_inside: usize,
    pub with_outcome_outside: usize,
    pub without_outcome_outside: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeDetails {
    pub n_thr: usize,
    pub proper_region: bool,
    pub previous: RegionCounts,
    pub current: RegionCounts,
    /// Current-period validation samples inside the region.
    pub region_samples: usize,
    pub total_samples: usize,
    pub share_lower: f64,
    pub share_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFitDetails {
    pub c_thr: f64,
    pub baseline_mode: bool,
    pub previous_model_at_previous: Option<f64>,
    pub current_model_entire: Option<f64>,
    pub current_model_region: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDetails {
    pub metric_diff: Option<f64>,
    pub proper_region: bool,
    pub interval: Option<ConfidenceInterval>,
    pub complement_interval: Option<ConfidenceInterval>,
    /// Why an interval could not be computed.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CheckDetails {
    SampleSize(SampleSizeDetails),
    ModelFit(ModelFitDetails),
    Comparison(ComparisonDetails),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: CheckKind,
    pub passed: bool,
    pub details: CheckDetails,
}

impl CheckReport {
    fn new(check: CheckKind, details: CheckDetails) -> Self {
        let passed = decide(&details);
        Self {
            check,
            passed,
            details,
        }
    }

    /// Recompute the decision from the recorded details.
    pub fn evaluate(&self) -> bool {
        decide(&self.details)
    }
}

fn decide(details: &CheckDetails) -> bool {
    match details {
        CheckDetails::SampleSize(d) => {
            let enough = |c: &RegionCounts| {
                c.with_outcome_inside >= d.n_thr
                    && (!d.proper_region
                        || (c.without_outcome_inside >= d.n_thr
                            && c.with_outcome_outside >= d.n_thr
                            && c.without_outcome_outside >= d.n_thr))
            };
            let share_ok = !d.proper_region || {
                let s = d.region_samples as f64;
                let m = d.total_samples as f64;
                d.share_lower * m <= s && s <= d.share_upper * m
            };
            enough(&d.previous) && enough(&d.current) && share_ok
        }
        CheckDetails::ModelFit(d) => {
            let above = |v: Option<f64>| v.is_some_and(|a| a > d.c_thr);
            above(d.previous_model_at_previous)
                && (d.baseline_mode || (above(d.current_model_entire) && above(d.current_model_region)))
        }
        CheckDetails::Comparison(d) => {
            d.metric_diff.is_some_and(|a| a > 0.0)
                && d.interval.as_ref().is_some_and(|ci| ci.lower > 0.0)
                && (!d.proper_region || d.complement_interval.as_ref().is_some_and(|ci| ci.lower <= 0.0))
        }
    }
}

fn region_counts(view: &PeriodView<'_>, subpop: &SubpopModel) -> (RegionCounts, usize, usize) {
    let mut sets: [BTreeSet<usize>; 4] = Default::default();
    let mut inside = 0;
    let mut total = 0;
    for p in &view.patients {
        for s in p.samples {
            let r = subpop.contains(s);
            total += 1;
            inside += usize::from(r);
            let k = match (s.has_outcome(), r) {
                (true, true) => 0,
                (false, true) => 1,
                (true, false) => 2,
                (false, false) => 3,
            };
            sets[k].insert(p.patient);
        }
    }
    (
        RegionCounts {
            with_outcome_inside: sets[0].len(),
            without_outcome_inside: sets[1].len(),
            with_outcome_outside: sets[2].len(),
            without_outcome_outside: sets[3].len(),
        },
        inside,
        total,
    )
}

#[derive(Debug, Clone, Copy)]
pub struct SampleSizeConfig {
    pub n_thr: usize,
    pub share_lower: f64,
    pub share_upper: f64,
}

impl Default for SampleSizeConfig {
    fn default() -> Self {
        Self {
            n_thr: 25,
            share_lower: 0.01,
            share_upper: 0.75,
        }
    }
}

pub fn sample_size_check(
    prev_validation: &PeriodView<'_>,
    curr_validation: &PeriodView<'_>,
    subpop: &SubpopModel,
    cfg: SampleSizeConfig,
) -> CheckReport {
    let (previous, _, _) = region_counts(prev_validation, subpop);
    let (current, region_samples, total_samples) = region_counts(curr_validation, subpop);
    CheckReport::new(
        CheckKind::SampleSize,
        CheckDetails::SampleSize(SampleSizeDetails {
            n_thr: cfg.n_thr,
            proper_region: !subpop.is_entire_population(),
            previous,
            current,
            region_samples,
            total_samples,
            share_lower: cfg.share_lower,
            share_upper: cfg.share_upper,
        }),
    )
}

/// In baseline mode `f_curr` may be `None`; it is never evaluated.
pub fn model_fit_check(
    prev_validation: &PeriodView<'_>,
    curr_validation: &PeriodView<'_>,
    f_prev: &OutcomeModel,
    f_curr: Option<&OutcomeModel>,
    subpop: &SubpopModel,
    c_thr: f64,
    baseline_mode: bool,
) -> CheckReport {
    let entire = SubpopModel::EntirePopulation;
    let prev = auc_within(f_prev, prev_validation.samples(), &entire).ok().map(|m| m.value);
    let (ce, cr) = match (baseline_mode, f_curr) {
        (false, Some(f)) => (
            auc_within(f, curr_validation.samples(), &entire).ok().map(|m| m.value),
            auc_within(f, curr_validation.samples(), subpop).ok().map(|m| m.value),
        ),
        _ => (None, None),
    };
    CheckReport::new(
        CheckKind::ModelFit,
        CheckDetails::ModelFit(ModelFitDetails {
            c_thr,
            baseline_mode,
            previous_model_at_previous: prev,
            current_model_entire: ce,
            current_model_region: cr,
        }),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct IntervalConfig {
    pub confidence: f64,
    pub iterations: usize,
    pub seed: u64,
}

fn comparison(
    kind: CheckKind,
    proper: bool,
    a: Option<f64>,
    region_ci: impl FnOnce() -> crate::Result<ConfidenceInterval>,
    complement_ci: impl FnOnce() -> crate::Result<ConfidenceInterval>,
) -> CheckReport {
    let mut d = ComparisonDetails {
        metric_diff: a,
        proper_region: proper,
        interval: None,
        complement_interval: None,
        note: None,
    };
    if a.is_some_and(|a| a > 0.0) {
        match region_ci() {
            Ok(ci) => {
                let go_on = ci.lower > 0.0;
                d.interval = Some(ci);
                if go_on && proper {
                    match complement_ci() {
                        Ok(c) => d.complement_interval = Some(c),
                        Err(e) => d.note = Some(format!("complement: {e}")),
                    }
                }
            }
            Err(e) => d.note = Some(e.to_string()),
        }
    } else if a.is_none() {
        d.note = Some("metric undefined in region".into());
    }
    CheckReport::new(kind, CheckDetails::Comparison(d))
}

pub fn performance_comparison_check(
    curr_validation: &PeriodView<'_>,
    f_prev: &OutcomeModel,
    f_curr: &OutcomeModel,
    subpop: &SubpopModel,
    cfg: IntervalConfig,
) -> CheckReport {
    let data = TwoModelData::from_view(curr_validation, f_prev, f_curr, subpop);
    let a = match (
        auc_within(f_curr, curr_validation.samples(), subpop),
        auc_within(f_prev, curr_validation.samples(), subpop),
    ) {
        (Ok(c), Ok(p)) => Some(c.value - p.value),
        _ => None,
    };
    comparison(
        CheckKind::PerformanceComparison,
        !subpop.is_entire_population(),
        a,
        || bootstrap_two_models(&data, cfg.confidence, cfg.iterations, rng::derive(cfg.seed, "region")),
        || bootstrap_two_models(&data.complement(), cfg.confidence, cfg.iterations, rng::derive(cfg.seed, "complement")),
    )
}

pub fn baseline_comparison_check(
    prev_validation: &PeriodView<'_>,
    curr_validation: &PeriodView<'_>,
    f_prev: &OutcomeModel,
    subpop: &SubpopModel,
    cfg: IntervalConfig,
) -> CheckReport {
    let data = TwoPeriodData::from_views(prev_validation, curr_validation, f_prev, subpop);
    let a = match (
        auc_within(f_prev, prev_validation.samples(), subpop),
        auc_within(f_prev, curr_validation.samples(), subpop),
    ) {
        (Ok(p), Ok(c)) => Some(p.value - c.value),
        _ => None,
    };
    comparison(
        CheckKind::BaselineComparison,
        !subpop.is_entire_population(),
        a,
        || bootstrap_two_periods(&data, cfg.confidence, cfg.iterations, rng::derive(cfg.seed, "region")),
        || bootstrap_two_periods(&data.complement(), cfg.confidence, cfg.iterations, rng::derive(cfg.seed, "complement")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::logistic::LogisticParams;
    use crate::models::ModelParams;
    use crate::panel::{DataSplit, PanelDataset, Sample, Vocabulary};

    fn vocab() -> Vocabulary {
        Vocabulary::new(vec!["g".into(), "x".into()]).unwrap()
    }

    /// `n` patients, one sample each at periods 1 and 2; `positives` patients
    /// spread over the id range have the outcome; feature g marks the last
    /// `in_region` patients.
    fn fixture(n: usize, positives: usize, in_region: usize) -> PanelDataset {
        let mut records = Vec::new();
        for p in 0..n {
            for period in [1, 2] {
                let g = if p >= n - in_region { 1.0 } else { 0.0 };
                let y = (p * 7919) % n < positives;
                let x = if y { 1.0 } else { 0.0 };
                records.push((
                    format!("p{p:04}"),
                    Sample::new(period, 1, vec![(0, g), (1, x)], u8::from(y)),
                ));
            }
        }
        let mut ds = PanelDataset::from_records(vocab(), records).unwrap();
        for p in &mut ds.panels {
            p.split = Some(DataSplit::Validation);
        }
        ds
    }

    fn model(coef_x: f64) -> OutcomeModel {
        let mut m = OutcomeModel::constant(0.5, &vocab(), 0);
        m.params = ModelParams::Logistic(LogisticParams {
            coefficients: vec![0.0, coef_x],
            intercept: 0.0,
        });
        m
    }

    #[test]
    fn sample_size_fails_at_24_patients() {
        let ds = fixture(200, 24, 0);
        let v1 = ds.view(1, &[DataSplit::Validation]);
        let v2 = ds.view(2, &[DataSplit::Validation]);
        let r = sample_size_check(&v1, &v2, &SubpopModel::EntirePopulation, SampleSizeConfig::default());
        assert!(!r.passed);
        let ds = fixture(200, 25, 0);
        let v1 = ds.view(1, &[DataSplit::Validation]);
        let v2 = ds.view(2, &[DataSplit::Validation]);
        let r = sample_size_check(&v1, &v2, &SubpopModel::EntirePopulation, SampleSizeConfig::default());
        assert!(r.passed);
        assert!(r.evaluate());
    }

    #[test]
    fn share_cap_applies_only_to_proper_regions() {
        // 160 of 200 samples (80%) inside the region
        let ds = fixture(200, 100, 160);
        let v1 = ds.view(1, &[DataSplit::Validation]);
        let v2 = ds.view(2, &[DataSplit::Validation]);
        let region = SubpopModel::feature_above(0, 0.5, 2);
        let r = sample_size_check(&v1, &v2, &region, SampleSizeConfig::default());
        let CheckDetails::SampleSize(d) = &r.details else {
            panic!()
        };
        assert_eq!((d.region_samples, d.total_samples), (160, 200));
        assert!(!r.passed);
        let ds = fixture(200, 100, 140);
        let v1 = ds.view(1, &[DataSplit::Validation]);
        let v2 = ds.view(2, &[DataSplit::Validation]);
        assert!(sample_size_check(&v1, &v2, &region, SampleSizeConfig::default()).passed);
        let everything = sample_size_check(&v1, &v2, &SubpopModel::EntirePopulation, SampleSizeConfig::default());
        let CheckDetails::SampleSize(d) = &everything.details else {
            panic!()
        };
        assert!(!d.proper_region && everything.passed);
    }

    #[test]
    fn model_fit_threshold_is_strict() {
        let ds = fixture(100, 40, 0);
        let v1 = ds.view(1, &[DataSplit::Validation]);
        let v2 = ds.view(2, &[DataSplit::Validation]);
        let e = SubpopModel::EntirePopulation;
        let flat = OutcomeModel::constant(0.5, &vocab(), 0);
        assert!(!model_fit_check(&v1, &v2, &flat, Some(&flat), &e, 0.5, false).passed);
        let good = model(2.0);
        assert!(model_fit_check(&v1, &v2, &good, Some(&good), &e, 0.5, false).passed);
        assert!(model_fit_check(&v1, &v2, &good, None, &e, 0.5, true).passed);
        assert!(!model_fit_check(&v1, &v2, &good, None, &e, 0.5, false).passed);
    }

    #[test]
    fn identical_models_fail_comparisons() {
        let ds = fixture(100, 40, 0);
        let v1 = ds.view(1, &[DataSplit::Validation]);
        let v2 = ds.view(2, &[DataSplit::Validation]);
        let m = model(1.0);
        let cfg = IntervalConfig {
            confidence: 0.9,
            iterations: 100,
            seed: 1,
        };
        let r = performance_comparison_check(&v2, &m, &m, &SubpopModel::EntirePopulation, cfg);
        assert!(!r.passed);
        let CheckDetails::Comparison(d) = &r.details else {
            panic!()
        };
        assert_eq!(d.metric_diff, Some(0.0));
        assert!(d.interval.is_none());
        let r = baseline_comparison_check(&v1, &v2, &m, &SubpopModel::EntirePopulation, cfg);
        assert!(!r.passed);
    }

    #[test]
    fn better_current_model_passes() {
        let ds = fixture(200, 80, 0);
        let v2 = ds.view(2, &[DataSplit::Validation]);
        let cfg = IntervalConfig {
            confidence: 0.9,
            iterations: 200,
            seed: 1,
        };
        let r = performance_comparison_check(&v2, &model(-1.0), &model(1.0), &SubpopModel::EntirePopulation, cfg);
        assert!(r.passed && r.evaluate());
    }

    #[test]
    fn evaluate_is_pure_function_of_details() {
        let ds = fixture(100, 40, 0);
        let v1 = ds.view(1, &[DataSplit::Validation]);
        let v2 = ds.view(2, &[DataSplit::Validation]);
        let mut r = sample_size_check(&v1, &v2, &SubpopModel::EntirePopulation, SampleSizeConfig::default());
        assert!(r.evaluate());
        if let CheckDetails::SampleSize(d) = &mut r.details {
            d.n_thr = 41;
        }
        assert!(!r.evaluate());
    }
}
