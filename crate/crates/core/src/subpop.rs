//! Sub-population indicators over (features, outcome) and their discovery
//! from per-sample loss differences between two outcome models.

use crate::error::{Error, Result};
use crate::metric::{auc, MetricValue};
use crate::models::logistic::clamp_prob;
use crate::models::tree::{fit_tree, Node, Tree, TreeData, TreeOptions};
use crate::models::{balanced_weights, cross_entropy, OutcomeModel, LEAF_GRID};
use crate::panel::{assign_stratum, DataSplit, PanelDataset, Sample, SplitFractions, Vocabulary};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Score above which a learned tree places a row inside the region.
pub const REGION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubpopModel {
    EntirePopulation,
    ComplementOf {
        reference: Box<SubpopModel>,
    },
    /// Tree over the feature columns plus one trailing outcome column.
    LearnedTree {
        tree: Tree,
        n_features: usize,
    },
}

impl SubpopModel {
    /// Region `{x : x[feature] > threshold}` as a one-split tree.
    pub fn feature_above(feature: u32, threshold: f64, n_features: usize) -> Self {
        SubpopModel::LearnedTree {
            tree: Tree {
                nodes: vec![
                    Node::Split {
                        column: feature,
                        threshold,
                        left: 1,
                        right: 2,
                    },
                    Node::Leaf {
                        value: 0.0,
                        count: 0,
                    },
                    Node::Leaf {
                        value: 1.0,
                        count: 0,
                    },
                ],
                n_columns: n_features + 1,
                min_samples_leaf: 1,
            },
            n_features,
        }
    }

    pub fn complement(&self) -> Self {
        SubpopModel::ComplementOf {
            reference: Box::new(self.clone()),
        }
    }

    pub fn is_entire_population(&self) -> bool {
        matches!(self, SubpopModel::EntirePopulation)
    }

    pub fn contains(&self, sample: &Sample) -> bool {
        match self {
            SubpopModel::EntirePopulation => true,
            SubpopModel::ComplementOf { reference } => !reference.contains(sample),
            SubpopModel::LearnedTree { tree, n_features } => {
                let y_col = *n_features as u32;
                let y = f64::from(sample.outcome);
                tree.predict_with(|c| if c == y_col { y } else { sample.value(c) }) > REGION_THRESHOLD
            }
        }
    }

    /// Human-readable conjunctions describing the region.
    pub fn rules(&self, vocabulary: &Vocabulary) -> Vec<String> {
        match self {
            SubpopModel::EntirePopulation => vec!["TRUE".to_string()],
            SubpopModel::ComplementOf { reference } => reference
                .rules(vocabulary)
                .into_iter()
                .map(|r| format!("NOT ({r})"))
                .collect(),
            SubpopModel::LearnedTree { tree, n_features } => {
                let n = *n_features as u32;
                tree.rules(
                    |c| {
                        if c == n {
                            "outcome".to_string()
                        } else if (c as usize) < vocabulary.len() {
                            vocabulary.name(c).to_string()
                        } else {
                            format!("column{c}")
                        }
                    },
                    REGION_THRESHOLD,
                )
            }
        }
    }
}

/// AUC of `model` over the samples inside `subpop`.
pub fn auc_within<'a>(
    model: &OutcomeModel,
    samples: impl IntoIterator<Item = &'a Sample>,
    subpop: &SubpopModel,
) -> Result<MetricValue> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        if subpop.contains(s) {
            scores.push(model.predict_proba(s));
            labels.push(s.has_outcome());
        }
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    auc(&scores, &labels).ok_or(Error::UndefinedMetric {
        n_pos,
        n_neg: labels.len() - n_pos,
    })
}

/// `z = 1` iff the previous model's cross-entropy strictly exceeds the current one's.
pub fn compute_subpop_labels<'a>(
    f_prev: &OutcomeModel,
    f_curr: &OutcomeModel,
    samples: impl IntoIterator<Item = &'a Sample>,
) -> Vec<bool> {
    samples
        .into_iter()
        .map(|s| loss_label(f_prev.predict_proba(s), f_curr.predict_proba(s), s.outcome))
        .collect()
}

/// `z' = 1` iff the previous model's absolute error strictly exceeds the current one's.
pub fn calibration_labels<'a>(
    f_prev: &OutcomeModel,
    f_curr: &OutcomeModel,
    samples: impl IntoIterator<Item = &'a Sample>,
) -> Vec<bool> {
    samples
        .into_iter()
        .map(|s| calibration_label(f_prev.predict_proba(s), f_curr.predict_proba(s), s.outcome))
        .collect()
}

pub fn loss_label(p_prev: f64, p_curr: f64, y: u8) -> bool {
    cross_entropy(p_prev, y) > cross_entropy(p_curr, y)
}

pub fn calibration_label(p_prev: f64, p_curr: f64, y: u8) -> bool {
    let y = f64::from(y);
    (y - clamp_prob(p_prev)).abs() > (y - clamp_prob(p_curr)).abs()
}

/// Sum of `loss_prev - loss_curr` over the selected samples.
pub fn loss_gain(f_prev: &OutcomeModel, f_curr: &OutcomeModel, samples: &[&Sample], selected: &[bool]) -> f64 {
    samples
        .iter()
        .zip(selected)
        .filter(|(_, &s)| s)
        .map(|(x, _)| f_prev.cross_entropy(x) - f_curr.cross_entropy(x))
        .sum()
}

/// Per-patient labels for the samples of one period, aligned with
/// `PatientPanel::samples_at(period)`. Keys are panel indices.
pub type PatientLabels = BTreeMap<usize, Vec<bool>>;

/// Labels for every train and validation sample of `period`.
pub fn label_period(
    dataset: &PanelDataset,
    period: i32,
    f_prev: &OutcomeModel,
    f_curr: &OutcomeModel,
) -> PatientLabels {
    dataset
        .view(period, &[DataSplit::Train, DataSplit::Validation])
        .patients
        .iter()
        .map(|p| (p.patient, compute_subpop_labels(f_prev, f_curr, p.samples)))
        .collect()
}

/// Re-pool train and validation patients and split them again at the same
/// proportions, stratified by whether the patient carries any `z = 1` label.
/// Test patients keep their assignment.
pub fn reshuffle_splits(dataset: &PanelDataset, labels: &PatientLabels, seed: u64) -> Result<PanelDataset> {
    let mut pooled_pos = Vec::new();
    let mut pooled_neg = Vec::new();
    let (mut n_train, mut n_val) = (0usize, 0usize);
    for (i, p) in dataset.panels.iter().enumerate() {
        match p.split {
            Some(DataSplit::Train) => n_train += 1,
            Some(DataSplit::Validation) => n_val += 1,
            _ => continue,
        }
        if labels.get(&i).is_some_and(|z| z.iter().any(|&v| v)) {
            pooled_pos.push(i);
        } else {
            pooled_neg.push(i);
        }
    }
    if n_train + n_val == 0 {
        return Err(Error::InvalidArgument(
            "dataset has no train or validation patients".into(),
        ));
    }
    let v = n_val as f64 / (n_train + n_val) as f64;
    let fractions = SplitFractions {
        train: 1.0 - v,
        validation: v,
        test: 0.0,
    };
    let mut out = dataset.clone();
    assign_stratum(&mut out, pooled_pos, fractions, rng::derive(seed, "reshuffle:z1"));
    assign_stratum(&mut out, pooled_neg, fractions, rng::derive(seed, "reshuffle:z0"));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubpopFit {
    pub model: SubpopModel,
    /// False when the labels were single-class and no tree was fit.
    pub region_found: bool,
    pub min_samples_leaf: Option<usize>,
    pub validation_auc: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SubpopOptions {
    pub max_depth: Option<usize>,
}

/// Fit the region tree on the train patients of `period` and pick the leaf
/// size by validation AUC on `z`.
pub fn fit_subpop_model(
    dataset: &PanelDataset,
    period: i32,
    labels: &PatientLabels,
    opts: SubpopOptions,
) -> Result<SubpopFit> {
    let d = dataset.vocabulary.len();
    let collect = |split: DataSplit| {
        let mut rows: Vec<&Sample> = Vec::new();
        let mut z = Vec::new();
        for p in dataset.view(period, &[split]).patients {
            if let Some(lab) = labels.get(&p.patient) {
                rows.extend(p.samples.iter());
                z.extend(lab.iter().copied());
            }
        }
        (rows, z)
    };
    let (train, z_train) = collect(DataSplit::Train);
    let (val, z_val) = collect(DataSplit::Validation);
    let Ok(weights) = balanced_weights(&z_train, None) else {
        return Ok(SubpopFit {
            model: SubpopModel::EntirePopulation,
            region_found: false,
            min_samples_leaf: None,
            validation_auc: None,
        });
    };
    let feats: Vec<&[(u32, f64)]> = train.iter().map(|s| s.features.as_slice()).collect();
    let y_col: Vec<f64> = train.iter().map(|s| f64::from(s.outcome)).collect();
    let data = TreeData::from_sparse(&feats, d, Some(y_col), z_train, weights);
    let mut best: Option<(Option<f64>, usize, Tree)> = None;
    for &m in &LEAF_GRID {
        let tree = fit_tree(
            &data,
            TreeOptions {
                min_samples_leaf: m,
                max_depth: opts.max_depth,
            },
        );
        let y_idx = d as u32;
        let scores: Vec<f64> = val
            .iter()
            .map(|s| {
                let y = f64::from(s.outcome);
                tree.predict_with(|c| if c == y_idx { y } else { s.value(c) })
            })
            .collect();
        let a = auc(&scores, &z_val).map(|m| m.value);
        let better = match &best {
            None => true,
            Some((b, _, _)) => a.unwrap_or(f64::NEG_INFINITY) > b.unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            best = Some((a, m, tree));
        }
    }
    let (a, m, tree) = best.expect("grid is nonempty");
    Ok(SubpopFit {
        model: SubpopModel::LearnedTree { tree, n_features: d },
        region_found: true,
        min_samples_leaf: Some(m),
        validation_auc: a,
    })
}
