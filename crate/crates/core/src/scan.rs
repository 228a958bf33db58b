//! Multi-task scan with Benjamini-Hochberg control and a minimum-effect filter.

use crate::config::ScanConfig;
use crate::error::{Error, Result};
use crate::models::OutcomeModel;
use crate::panel::PanelDataset;
use crate::rng;
use crate::shift_test::{fit_period_model, test_shift_with_models, Scope, TaskKey, TaskResult, TaskStatus};
use crate::subpop::SubpopModel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

/// Step-up procedure: reject the `k` smallest p-values where `k` is the
/// largest index with `p_(k) <= k alpha / m`.
pub fn benjamini_hochberg_mask(p_values: &[f64], alpha: f64) -> Vec<bool> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut cutoff = None;
    for (rank, &i) in order.iter().enumerate() {
        if p_values[i] <= (rank + 1) as f64 * alpha / m as f64 {
            cutoff = Some(p_values[i]);
        }
    }
    p_values
        .iter()
        .map(|&p| cutoff.is_some_and(|c| p <= c))
        .collect()
}

pub fn benjamini_hochberg<K: Ord + Clone>(p_values: &BTreeMap<K, f64>, alpha: f64) -> BTreeSet<K> {
    let keys: Vec<&K> = p_values.keys().collect();
    let ps: Vec<f64> = p_values.values().copied().collect();
    benjamini_hochberg_mask(&ps, alpha)
        .into_iter()
        .zip(keys)
        .filter(|(r, _)| *r)
        .map(|(_, k)| k.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub config: ScanConfig,
    pub results: Vec<TaskResult>,
    pub alpha: f64,
    pub gamma: f64,
    pub selected: Vec<TaskKey>,
}

/// Keys selected by BH at `alpha` among tested tasks, restricted to `a > gamma`.
pub fn select(results: &[TaskResult], alpha: f64, gamma: f64) -> Vec<TaskKey> {
    let tested: BTreeMap<TaskKey, f64> = results
        .iter()
        .filter_map(|r| r.p_value.map(|p| (r.key.clone(), p)))
        .collect();
    let rejected = benjamini_hochberg(&tested, alpha);
    results
        .iter()
        .filter(|r| rejected.contains(&r.key) && r.metric_diff.is_some_and(|a| a > gamma))
        .map(|r| r.key.clone())
        .collect()
}

/// Scan every outcome over every adjacent period pair at population and
/// discovered-region scope. Per-period models are fit once and shared by the
/// two period pairs that use them. `workers` bounds the thread pool.
pub fn scan_shift(datasets: &BTreeMap<String, PanelDataset>, config: &ScanConfig, workers: usize) -> Result<ScanReport> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::InvalidArgument("scan needs at least one outcome".into()));
    }
    for (id, ds) in datasets {
        if ds.periods().len() < 2 {
            return Err(Error::InvalidArgument(format!("outcome {id} has fewer than two periods")));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    pool.install(|| run_scan(datasets, config))
}

fn run_scan(datasets: &BTreeMap<String, PanelDataset>, config: &ScanConfig) -> Result<ScanReport> {
    let model_jobs: Vec<(&String, i32)> = datasets
        .iter()
        .flat_map(|(id, ds)| ds.periods().into_iter().map(move |t| (id, t)))
        .collect();
    let models: BTreeMap<(String, i32), std::result::Result<OutcomeModel, String>> = model_jobs
        .par_iter()
        .map(|&(id, t)| {
            let seed = rng::derive(config.seed, &format!("model:{id}:{t}"));
            let m = fit_period_model(&datasets[id], t, config, seed).map_err(|e| e.to_string());
            ((id.clone(), t), m)
        })
        .collect();

    let mut tasks = Vec::new();
    for (id, ds) in datasets {
        let periods = ds.periods();
        for w in periods.windows(2) {
            for scope in [Scope::Population, Scope::DiscoveredSubpop] {
                tasks.push((id, w[0], TaskKey::new(id.clone(), w[1], scope)));
            }
        }
    }
    let results: Vec<TaskResult> = tasks
        .par_iter()
        .map(|(id, prev, key)| {
            let seed = key.seed(config.seed);
            let fp = &models[&((*id).clone(), *prev)];
            let fc = &models[&((*id).clone(), key.period)];
            match (fp, fc) {
                (Ok(fp), Ok(fc)) => {
                    let subpop = (key.scope == Scope::Population).then_some(SubpopModel::EntirePopulation);
                    test_shift_with_models(&datasets[*id], key.clone(), *prev, fp, fc, subpop, config, seed)
                }
                (Err(e), _) | (_, Err(e)) => TaskResult {
                    key: key.clone(),
                    status: TaskStatus::GatedOut {
                        gate: "model_fitting".into(),
                        reason: e.clone(),
                    },
                    gate_reports: Vec::new(),
                    p_value: None,
                    metric_diff: None,
                    permutation: None,
                    subpop: None,
                    subpop_rules: Vec::new(),
                    region_found: None,
                },
            }
        })
        .collect();
    let selected = select(&results, config.alpha, config.gamma);
    Ok(ScanReport {
        config: config.clone(),
        results,
        alpha: config.alpha,
        gamma: config.gamma,
        selected,
    })
}

impl ScanReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One tab-separated row per task with a header row.
    pub fn write_table(&self, mut w: impl Write) -> Result<()> {
        let selected: BTreeSet<&TaskKey> = self.selected.iter().collect();
        writeln!(w, "outcome_id\tperiod\tscope\tstatus\tgate\tp_value\tmetric_diff\tselected\tsubpop_rules")?;
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.results {
            let (status, gate) = match &r.status {
                TaskStatus::Tested => ("tested", ""),
                TaskStatus::GatedOut { gate, .. } => ("gated_out", gate.as_str()),
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.key.outcome_id,
                r.key.period,
                r.key.scope.as_str(),
                status,
                gate,
                fmt(r.p_value),
                fmt(r.metric_diff),
                selected.contains(&r.key),
                r.subpop_rules.join(" OR "),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bh_hand_cases() {
        assert_eq!(benjamini_hochberg_mask(&[0.001, 0.02, 0.04], 0.05), vec![true; 3]);
        assert_eq!(benjamini_hochberg_mask(&[0.04, 0.5, 0.9], 0.05), vec![false; 3]);
        assert_eq!(benjamini_hochberg_mask(&[0.049], 0.05), vec![true]);
        assert!(benjamini_hochberg_mask(&[], 0.05).is_empty());
        // step-up: 0.03 fails its own threshold but the larger rank passes
        assert_eq!(benjamini_hochberg_mask(&[0.03, 0.032], 0.05), vec![true, true]);
        // ties stay together
        assert_eq!(benjamini_hochberg_mask(&[0.02, 0.02, 0.9], 0.05), vec![true, true, false]);
    }

    #[test]
    fn keyed_wrapper() {
        let mut p = BTreeMap::new();
        p.insert("a", 0.001);
        p.insert("b", 0.5);
        assert_eq!(benjamini_hochberg(&p, 0.05), BTreeSet::from(["a"]));
    }

    fn tested(id: &str, p: f64, a: f64) -> TaskResult {
        TaskResult {
            key: TaskKey::new(id, 1, Scope::Population),
            status: TaskStatus::Tested,
            gate_reports: vec![],
            p_value: Some(p),
            metric_diff: Some(a),
            permutation: None,
            subpop: None,
            subpop_rules: vec![],
            region_found: None,
        }
    }

    #[test]
    fn gamma_filter() {
        let r = vec![tested("a", 0.001, 0.05), tested("b", 0.001, 0.005)];
        let s = select(&r, 0.05, 0.01);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].outcome_id, "a");
        assert!(select(&r, 0.05, f64::INFINITY).is_empty());
    }

    proptest! {
        #[test]
        fn lowering_a_p_value_never_shrinks_rejections(
            ps in prop::collection::vec(0.0001f64..1.0, 1..30),
            idx in any::<prop::sample::Index>(),
            factor in 0.0f64..1.0,
        ) {
            let before = benjamini_hochberg_mask(&ps, 0.05);
            let mut lowered = ps.clone();
            let i = idx.index(ps.len());
            lowered[i] *= factor;
            let after = benjamini_hochberg_mask(&lowered, 0.05);
            for k in 0..ps.len() {
                prop_assert!(!before[k] || after[k]);
            }
        }

        #[test]
        fn rejections_satisfy_threshold(ps in prop::collection::vec(0.0f64..1.0, 1..30)) {
            let mask = benjamini_hochberg_mask(&ps, 0.1);
            let k = mask.iter().filter(|&&r| r).count();
            for (p, r) in ps.iter().zip(&mask) {
                if *r {
                    prop_assert!(*p <= k as f64 * 0.1 / ps.len() as f64);
                }
            }
        }
    }
}
