use rand::Rng;
use shiftscan::analysis::{fit_period_classifier, importance_weights, univariate_shift_scan};
use shiftscan::metric::auc;
use shiftscan::models::{fit_outcome_model_with, FitOptions, ModelKind};
use shiftscan::panel::{DataSplit, Sample, Vocabulary};
use shiftscan::rng;
use shiftscan::synth::{generate, ShiftScenario};
use std::collections::BTreeSet;

const D: usize = 100;
const PLANTED: [usize; 5] = [3, 21, 42, 67, 88];

fn period_samples(n: usize, seed: u64, period: i32, shifted: bool) -> Vec<Sample> {
    let mut base_rng = rng::rng(rng::derive(seed, "frequencies"));
    let base: Vec<f64> = (0..D).map(|_| base_rng.random_range(0.1..0.5)).collect();
    let mut r = rng::rng(rng::derive(seed, &format!("period:{period}")));
    (0..n)
        .map(|i| {
            let features = (0..D)
                .filter(|&j| {
                    let q = if shifted && PLANTED.contains(&j) { base[j] * 0.7 } else { base[j] };
                    r.random::<f64>() < q
                })
                .map(|j| (j as u32, 1.0))
                .collect();
            Sample::new(period, (i % 12 + 1) as u8, features, 0)
        })
        .collect()
}

#[test]
fn planted_frequency_drops_are_recovered_exactly() {
    let vocabulary = Vocabulary::new((0..D).map(|j| format!("c{j:03}")).collect()).unwrap();
    let expected: BTreeSet<String> = PLANTED.iter().map(|j| format!("c{j:03}")).collect();
    let seeds = 50;
    let mut exact = 0;
    for seed in 0..seeds {
        let prev = period_samples(10_000, seed, 2019, false);
        let curr = period_samples(10_000, seed, 2020, true);
        let pr: Vec<&Sample> = prev.iter().collect();
        let cr: Vec<&Sample> = curr.iter().collect();
        let findings = univariate_shift_scan(&pr, &cr, &vocabulary, 0.05, seed).unwrap();
        let accepted: BTreeSet<String> = findings.iter().filter(|f| f.bh_accepted).map(|f| f.feature_id.clone()).collect();
        exact += (accepted == expected) as u32;
    }
    assert!(exact as f64 >= 0.9 * seeds as f64, "exact recovery in {exact} of {seeds} seeds");
}

#[test]
fn identical_periods_yield_no_accepted_shift() {
    let vocabulary = Vocabulary::new((0..D).map(|j| format!("c{j:03}")).collect()).unwrap();
    let prev = period_samples(5_000, 7, 2019, false);
    let curr = period_samples(5_000, 7, 2020, false);
    let pr: Vec<&Sample> = prev.iter().collect();
    let cr: Vec<&Sample> = curr.iter().collect();
    let findings = univariate_shift_scan(&pr, &cr, &vocabulary, 0.05, 1).unwrap();
    assert!(findings.iter().all(|f| !f.bh_accepted));
}

#[test]
fn importance_weighting_without_shift_leaves_auc_unchanged() {
    let scenario = ShiftScenario {
        n_patients: 3000,
        samples_per_period: 4,
        seed: 4,
        ..ShiftScenario::default()
    };
    let (data, _) = generate(&scenario).unwrap();
    let split = |period, s| data.view(period, &[s]).samples().collect::<Vec<&Sample>>();
    let (train_prev, train_curr) = (split(2018, DataSplit::Train), split(2019, DataSplit::Train));
    let (val_prev, val_curr) = (split(2018, DataSplit::Validation), split(2019, DataSplit::Validation));
    let classifier = fit_period_classifier(&train_prev, &train_curr, data.vocabulary.len(), 4).unwrap();
    let scores: Vec<f64> = train_prev.iter().map(|s| classifier.predict(s)).collect();
    let weights = importance_weights(&scores, train_prev.len(), train_curr.len()).unwrap();

    let fit = |w: Option<Vec<f64>>| {
        let opts = FitOptions {
            sample_weights: w,
            ..FitOptions::default()
        };
        fit_outcome_model_with(&data.vocabulary, &train_prev, &val_prev, ModelKind::LogisticRegression, 4, &opts).unwrap()
    };
    let plain = fit(None);
    let weighted = fit(Some(weights.weights));
    let labels: Vec<bool> = val_curr.iter().map(|s| s.has_outcome()).collect();
    let score = |m: &shiftscan::models::OutcomeModel| {
        let p: Vec<f64> = val_curr.iter().map(|s| m.predict_proba(s)).collect();
        auc(&p, &labels).unwrap().value
    };
    let (a, b) = (score(&plain), score(&weighted));
    assert!((a - b).abs() < 0.01, "{a} vs {b}");
}
