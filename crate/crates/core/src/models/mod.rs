//! Per-period outcome models.

pub mod logistic;
pub mod tree;

use crate::error::{Error, Result};
use crate::metric::auc;
use crate::optim::LbfgsOptions;
use crate::panel::{Sample, Vocabulary};
use logistic::{clamp_prob, fit_logistic, Design, LogisticParams, C_GRID};
use serde::{Deserialize, Serialize};
use std::path::Path;
use tree::{fit_tree, Tree, TreeData, TreeOptions};

pub use logistic::PROB_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogisticRegression,
    DecisionTree,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic_regression" | "lr" => Ok(Self::LogisticRegression),
            "decision_tree" | "tree" => Ok(Self::DecisionTree),
            other => Err(Error::InvalidArgument(format!("unknown model kind {other}"))),
        }
    }
}

/// Leaf-size grid for trees, simplest first.
pub const LEAF_GRID: [usize; 3] = [100, 25, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelParams {
    Logistic(LogisticParams),
    Tree(Tree),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub kind: ModelKind,
    pub params: ModelParams,
    /// Regularization constant C (logistic) or min samples per leaf (tree).
    pub hyperparameter: f64,
    pub training_period: i32,
    pub vocabulary_fingerprint: u64,
    pub n_features: usize,
    pub seed: u64,
    /// False when the optimizer hit its iteration cap.
    pub converged: bool,
    pub validation_auc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Extra per-sample weights multiplied into the class weights.
    pub sample_weights: Option<Vec<f64>>,
    pub max_depth: Option<usize>,
    /// Restrict the hyperparameter grid to one value.
    pub fixed_hyperparameter: Option<f64>,
}

/// Class weights `n / (2 n_c)` times optional per-sample weights.
pub fn balanced_weights(labels: &[bool], extra: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = labels.len() as f64;
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = n - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::SingleClass);
    }
    let (wp, wn) = (n / (2.0 * n_pos), n / (2.0 * n_neg));
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let base = if l { wp } else { wn };
            base * extra.map_or(1.0, |e| e[i])
        })
        .collect())
}

pub fn fit_outcome_model(
    vocabulary: &Vocabulary,
    train: &[&Sample],
    validation: &[&Sample],
    kind: ModelKind,
    seed: u64,
) -> Result<OutcomeModel> {
    fit_outcome_model_with(vocabulary, train, validation, kind, seed, &FitOptions::default())
}

pub fn fit_outcome_model_with(
    vocabulary: &Vocabulary,
    train: &[&Sample],
    validation: &[&Sample],
    kind: ModelKind,
    seed: u64,
    opts: &FitOptions,
) -> Result<OutcomeModel> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<bool> = train.iter().map(|s| s.has_outcome()).collect();
    let weights = balanced_weights(&labels, opts.sample_weights.as_deref())?;
    let rows: Vec<&[(u32, f64)]> = train.iter().map(|s| s.features.as_slice()).collect();
    let d = vocabulary.len();
    let training_period = train.iter().map(|s| s.period).max().unwrap_or(0);
    let val_labels: Vec<bool> = validation.iter().map(|s| s.has_outcome()).collect();
    let val_auc = |score: &dyn Fn(&Sample) -> f64| -> Option<f64> {
        let scores: Vec<f64> = validation.iter().map(|s| score(s)).collect();
        auc(&scores, &val_labels).map(|m| m.value)
    };

    let base = OutcomeModel {
        kind,
        params: ModelParams::Logistic(LogisticParams::zeros(d)),
        hyperparameter: 0.0,
        training_period,
        vocabulary_fingerprint: vocabulary.fingerprint(),
        n_features: d,
        seed,
        converged: true,
        validation_auc: None,
    };

    match kind {
        ModelKind::LogisticRegression => {
            let design = Design {
                rows,
                labels,
                weights,
                n_features: d,
            };
            let grid: Vec<f64> = match opts.fixed_hyperparameter {
                Some(c) => vec![c],
                None => C_GRID.to_vec(),
            };
            let mut best: Option<(Option<f64>, f64, logistic::LogisticFit)> = None;
            let mut warm: Option<LogisticParams> = None;
            for &c in &grid {
                let fit = fit_logistic(&design, c, warm.as_ref(), LbfgsOptions::default());
                warm = Some(fit.params.clone());
                let a = val_auc(&|s: &Sample| fit.params.score(&s.features));
                let better = match &best {
                    None => true,
                    Some((best_a, _, _)) => a.unwrap_or(f64::NEG_INFINITY) > best_a.unwrap_or(f64::NEG_INFINITY),
                };
                if better {
                    best = Some((a, c, fit));
                }
            }
            let (a, c, fit) = best.expect("grid is nonempty");
            // with an undefined validation AUC every candidate ties; use C = 1
            let (a, c, fit) = if a.is_none() && opts.fixed_hyperparameter.is_none() {
                let f = fit_logistic(&design, 1.0, None, LbfgsOptions::default());
                (None, 1.0, f)
            } else {
                (a, c, fit)
            };
            Ok(OutcomeModel {
                params: ModelParams::Logistic(fit.params),
                hyperparameter: c,
                converged: fit.converged,
                validation_auc: a,
                ..base
            })
        }
        ModelKind::DecisionTree => {
            let data = TreeData::from_sparse(&rows, d, None, labels, weights);
            let grid: Vec<usize> = match opts.fixed_hyperparameter {
                Some(m) => vec![m as usize],
                None => LEAF_GRID.to_vec(),
            };
            let mut best: Option<(Option<f64>, usize, Tree)> = None;
            for &m in &grid {
                let tree = fit_tree(
                    &data,
                    TreeOptions {
                        min_samples_leaf: m,
                        max_depth: opts.max_depth,
                    },
                );
                let a = val_auc(&|s: &Sample| tree.predict_with(|c| s.value(c)));
                let better = match &best {
                    None => true,
                    Some((best_a, _, _)) => a.unwrap_or(f64::NEG_INFINITY) > best_a.unwrap_or(f64::NEG_INFINITY),
                };
                if better {
                    best = Some((a, m, tree));
                }
            }
            let (a, m, tree) = best.expect("grid is nonempty");
            Ok(OutcomeModel {
                params: ModelParams::Tree(tree),
                hyperparameter: m as f64,
                validation_auc: a,
                ..base
            })
        }
    }
}

impl OutcomeModel {
    /// Logistic model that predicts `p` everywhere.
    pub fn constant(p: f64, vocabulary: &Vocabulary, training_period: i32) -> Self {
        let p = clamp_prob(p);
        Self {
            kind: ModelKind::LogisticRegression,
            params: ModelParams::Logistic(LogisticParams {
                coefficients: vec![0.0; vocabulary.len()],
                intercept: (p / (1.0 - p)).ln(),
            }),
            hyperparameter: 0.0,
            training_period,
            vocabulary_fingerprint: vocabulary.fingerprint(),
            n_features: vocabulary.len(),
            seed: 0,
            converged: true,
            validation_auc: None,
        }
    }

    pub fn predict_features(&self, features: &[(u32, f64)]) -> f64 {
        match &self.params {
            ModelParams::Logistic(p) => p.predict(features),
            ModelParams::Tree(t) => t.predict_with(|c| {
                features
                    .binary_search_by_key(&c, |&(j, _)| j)
                    .map_or(0.0, |k| features[k].1)
            }),
        }
    }

    pub fn predict_proba(&self, sample: &Sample) -> f64 {
        self.predict_features(&sample.features)
    }

    pub fn cross_entropy(&self, sample: &Sample) -> f64 {
        cross_entropy(self.predict_proba(sample), sample.outcome)
    }

    pub fn check_vocabulary(&self, vocabulary: &Vocabulary) -> Result<()> {
        if self.vocabulary_fingerprint == vocabulary.fingerprint() {
            Ok(())
        } else {
            Err(Error::VocabularyMismatch)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

/// `-y ln p - (1-y) ln(1-p)` on the clamped probability.
pub fn cross_entropy(p: f64, y: u8) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn vocab(d: usize) -> Vocabulary {
        Vocabulary::new((0..d).map(|j| format!("f{j}")).collect()).unwrap()
    }

    fn separable() -> Vec<Sample> {
        (0..200)
            .map(|i| {
                let x = (i % 2) as f64;
                Sample::new(1, 1, vec![(0, x)], (i % 2) as u8)
            })
            .collect()
    }

    #[test]
    fn separable_logistic() {
        let s = separable();
        let refs: Vec<&Sample> = s.iter().collect();
        let m = fit_outcome_model(&vocab(1), &refs, &refs, ModelKind::LogisticRegression, 0).unwrap();
        let ModelParams::Logistic(p) = &m.params else {
            panic!()
        };
        assert!(p.coefficients[0] > 0.0);
        assert_eq!(m.validation_auc, Some(1.0));
        // all grid points tie at AUC 1, so the strongest penalty wins
        assert_eq!(m.hyperparameter, 1e-5);
    }

    #[test]
    fn separable_tree() {
        let s = separable();
        let refs: Vec<&Sample> = s.iter().collect();
        let m = fit_outcome_model(&vocab(1), &refs, &refs, ModelKind::DecisionTree, 0).unwrap();
        assert_eq!(m.validation_auc, Some(1.0));
        assert_eq!(m.hyperparameter, 100.0);
        assert_eq!(m.predict_proba(&s[1]), 1.0);
        assert_eq!(m.predict_proba(&s[0]), 0.0);
    }

    #[test]
    fn single_class_rejected() {
        let s: Vec<Sample> = (0..10).map(|_| Sample::new(1, 1, vec![], 0)).collect();
        let refs: Vec<&Sample> = s.iter().collect();
        let e = fit_outcome_model(&vocab(1), &refs, &refs, ModelKind::LogisticRegression, 0);
        assert!(matches!(e, Err(Error::SingleClass)));
    }

    #[test]
    fn random_labels_give_chance_auc() {
        let mut r = crate::rng::rng(11);
        let make = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<Sample> {
            (0..n)
                .map(|_| {
                    let mut f: Vec<(u32, f64)> = Vec::new();
                    for j in 0..5u32 {
                        if r.random::<bool>() {
                            f.push((j, 1.0));
                        }
                    }
                    Sample::new(1, 1, f, u8::from(r.random::<bool>()))
                })
                .collect()
        };
        let train = make(&mut r, 2000);
        let val = make(&mut r, 10_000);
        let tr: Vec<&Sample> = train.iter().collect();
        let va: Vec<&Sample> = val.iter().collect();
        let m = fit_outcome_model(&vocab(5), &tr, &va, ModelKind::LogisticRegression, 0).unwrap();
        let a = m.validation_auc.unwrap();
        assert!((0.45..=0.55).contains(&a), "auc {a}");
    }

    #[test]
    fn predictions_match_dot_product_oracle() {
        let mut r = crate::rng::rng(5);
        let coefficients: Vec<f64> = (0..8).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
        let intercept = 0.3;
        let v = vocab(8);
        let mut m = OutcomeModel::constant(0.5, &v, 0);
        m.params = ModelParams::Logistic(LogisticParams {
            coefficients: coefficients.clone(),
            intercept,
        });
        for _ in 0..100 {
            let mut dense = [0.0; 8];
            for x in dense.iter_mut() {
                if r.random::<bool>() {
                    *x = r.random::<f64>();
                }
            }
            let sparse: Vec<(u32, f64)> = dense.iter().enumerate().map(|(j, &x)| (j as u32, x)).collect();
            let s = Sample::new(1, 1, sparse, 0);
            let z: f64 = intercept + dense.iter().zip(&coefficients).map(|(a, b)| a * b).sum::<f64>();
            let oracle = 1.0 / (1.0 + (-z).exp());
            assert!((m.predict_proba(&s) - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cross_entropy(0.9, 1) - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!(cross_entropy(0.0, 1).is_finite());
    }

    #[test]
    fn constant_and_zero_models() {
        let v = vocab(1);
        let m = OutcomeModel::constant(0.5, &v, 0);
        let s = Sample::new(1, 1, vec![(0, 0.0)], 0);
        assert_eq!(m.predict_proba(&s), 0.5);
        let mut w = m.clone();
        w.params = ModelParams::Logistic(LogisticParams {
            coefficients: vec![1.0],
            intercept: 0.0,
        });
        assert_eq!(w.predict_proba(&s), 0.5);
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let mut r = crate::rng::rng(9);
        let s: Vec<Sample> = (0..400)
            .map(|_| {
                let f: Vec<(u32, f64)> = (0..3u32).map(|j| (j, r.random::<f64>())).collect();
                let y = u8::from(f[0].1 + r.random::<f64>() * 0.5 > 0.8);
                Sample::new(3, 1, f, y)
            })
            .collect();
        let refs: Vec<&Sample> = s.iter().collect();
        for kind in [ModelKind::LogisticRegression, ModelKind::DecisionTree] {
            let m = fit_outcome_model(&vocab(3), &refs, &refs, kind, 7).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.json");
            m.save(&path).unwrap();
            let back = OutcomeModel::load(&path).unwrap();
            assert_eq!(m, back);
            assert_eq!(back.training_period, 3);
        }
    }
}
