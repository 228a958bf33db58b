//! Plot-data exports: per-period AUC series and loss-difference histograms.

use anyhow::{Context, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use shiftscan::metric::SortedScores;
use shiftscan::models::{fit_outcome_model, OutcomeModel};
use shiftscan::panel::{DataSplit, PanelDataset, PeriodView, Sample};
use shiftscan::rng;
use shiftscan::shift_test::fit_period_model;
use shiftscan::ScanConfig;
use std::collections::BTreeMap;
use std::io::Write;

/// Patient-clustered bootstrap standard error of one model's AUC on a view.
/// Resamples with a degenerate class are skipped.
pub fn auc_with_std_error(view: &PeriodView<'_>, model: &OutcomeModel, iterations: usize, seed: u64) -> Option<(f64, f64)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut owner = Vec::new();
    for (k, p) in view.patients.iter().enumerate() {
        for s in p.samples {
            scores.push(model.predict_proba(s));
            labels.push(s.outcome == 1);
            owner.push(k);
        }
    }
    let sorted = SortedScores::new(&scores);
    let point = sorted.weighted_auc(&labels, |_| 1.0)?;
    let n = view.patients.len();
    let mut reps = Vec::with_capacity(iterations);
    for b in 0..iterations as u64 {
        let mut r = rng::stream(seed, b);
        let mut mult = vec![0.0; n];
        for _ in 0..n {
            mult[r.random_range(0..n)] += 1.0;
        }
        if let Some(v) = sorted.weighted_auc(&labels, |i| mult[owner[i]]) {
            reps.push(v);
        }
    }
    if reps.len() < 2 {
        return Some((point, f64::NAN));
    }
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    let var = reps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64;
    Some((point, var.sqrt()))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// For every period, the AUC on its test split of the model trained on the
/// previous period and of the model trained on the period itself.
pub fn write_auc_series(ds: &PanelDataset, config: &ScanConfig, mut w: impl Write) -> Result<()> {
    let periods = ds.periods();
    let mut models = BTreeMap::new();
    for &t in &periods {
        let m = fit_period_model(ds, t, config, rng::derive(config.seed, &format!("model:{t}")))
            .with_context(|| format!("fitting the period {t} model"))?;
        models.insert(t, m);
    }
    writeln!(w, "period\tmodel\ttraining_period\tauc\tstd_error\tn_samples")?;
    for (i, &t) in periods.iter().enumerate() {
        let view = ds.view(t, &[DataSplit::Test]);
        let mut rows = Vec::new();
        if i > 0 {
            rows.push(("previous", periods[i - 1]));
        }
        rows.push(("current", t));
        for (label, trained) in rows {
            let seed = rng::derive(config.seed, &format!("auc-series:{t}:{trained}"));
            let (auc, se) = auc_with_std_error(&view, &models[&trained], config.b_bootstrap, seed)
                .unwrap_or((f64::NAN, f64::NAN));
            writeln!(
                w,
                "{t}\t{label}\t{trained}\t{}\t{}\t{}",
                fmt(auc),
                fmt(se),
                view.sample_count()
            )?;
        }
    }
    Ok(())
}

/// Shared equal-width bins over both series.
pub fn histogram(a: &[f64], b: &[f64], bins: usize) -> Vec<(f64, f64, usize, usize)> {
    let all = a.iter().chain(b);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || bins == 0 {
        return Vec::new();
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let slot = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    let mut out: Vec<(f64, f64, usize, usize)> = (0..bins)
        .map(|k| (lo + k as f64 * width, lo + (k + 1) as f64 * width, 0, 0))
        .collect();
    for &v in a {
        out[slot(v)].2 += 1;
    }
    for &v in b {
        out[slot(v)].3 += 1;
    }
    out
}

/// Per-sample cross-entropy differences `loss(f_prev) - loss(f_curr)` on the
/// current test split next to a control from two models fit on disjoint
/// halves of the current training patients.
pub fn write_loss_histogram(ds: &PanelDataset, config: &ScanConfig, bins: usize, mut w: impl Write) -> Result<()> {
    let periods = ds.periods();
    writeln!(w, "period\tbin_lower\tbin_upper\tshift_count\tcontrol_count")?;
    for pair in periods.windows(2) {
        let (prev, t) = (pair[0], pair[1]);
        let fit = |p: i32| {
            fit_period_model(ds, p, config, rng::derive(config.seed, &format!("model:{p}")))
                .with_context(|| format!("fitting the period {p} model"))
        };
        let (f_prev, f_curr) = (fit(prev)?, fit(t)?);

        let train = ds.view(t, &[DataSplit::Train]);
        let validation: Vec<&Sample> = ds.view(t, &[DataSplit::Validation]).samples().collect();
        let mut order: Vec<usize> = (0..train.patients.len()).collect();
        order.shuffle(&mut rng::rng(rng::derive(config.seed, &format!("control-halves:{t}"))));
        let half = order.len() / 2;
        let fit_half = |idx: &[usize], label: &str| {
            let samples: Vec<&Sample> = idx.iter().flat_map(|&k| train.patients[k].samples).collect();
            let seed = rng::derive(config.seed, &format!("control:{t}:{label}"));
            fit_outcome_model(&ds.vocabulary, &samples, &validation, config.model_kind, seed)
                .with_context(|| format!("fitting a period {t} control model"))
        };
        let (f_a, f_b) = (fit_half(&order[..half], "a")?, fit_half(&order[half..], "b")?);

        let test: Vec<&Sample> = ds.view(t, &[DataSplit::Test]).samples().collect();
        let shift: Vec<f64> = test.iter().map(|s| f_prev.cross_entropy(s) - f_curr.cross_entropy(s)).collect();
        let control: Vec<f64> = test.iter().map(|s| f_a.cross_entropy(s) - f_b.cross_entropy(s)).collect();
        for (lower, upper, a, b) in histogram(&shift, &control, bins) {
            writeln!(w, "{t}\t{lower}\t{upper}\t{a}\t{b}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_value_once() {
        let h = histogram(&[0.0, 0.5, 1.0], &[0.25, 2.0], 4);
        assert_eq!(h.len(), 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 3);
        assert_eq!(h.iter().map(|b| b.3).sum::<usize>(), 2);
        assert_eq!(h[0].0, 0.0);
        assert_eq!(h[3].1, 2.0);
        assert_eq!(h[3].3, 1);
    }

    #[test]
    fn constant_values_fall_in_one_bin() {
        let h = histogram(&[1.0, 1.0], &[], 3);
        assert_eq!(h[0].2, 2);
    }
}
