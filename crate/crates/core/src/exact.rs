//! Exact joint distributions over small discrete spaces.
//!
//! `enumerate_exact` walks every joint state of a synthetic scenario and
//! returns the probability of each observed configuration per period. The
//! tables support exact checks of conditional-distribution identities.

use crate::error::{Error, Result};
use crate::synth::ShiftScenario;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Largest number of joint states `enumerate_exact` will visit.
pub const MAX_STATES: u128 = 1 << 16;

/// Probability table over named discrete variables, stored row-major with the
/// last variable varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub variables: Vec<String>,
    pub cardinalities: Vec<usize>,
    pub probs: Vec<f64>,
}

impl JointTable {
    pub fn new(variables: Vec<String>, cardinalities: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if variables.len() != cardinalities.len() {
            return Err(Error::InvalidArgument("one cardinality per variable is required".into()));
        }
        let cells: usize = cardinalities.iter().product();
        if probs.len() != cells {
            return Err(Error::InvalidArgument(format!(
                "table has {} cells but the cardinalities imply {cells}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidArgument("probabilities must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self {
            variables,
            cardinalities,
            probs,
        })
    }

    fn zeros(variables: Vec<String>, cardinalities: Vec<usize>) -> Self {
        let cells = cardinalities.iter().product();
        Self {
            variables,
            cardinalities,
            probs: vec![0.0; cells],
        }
    }

    pub fn position(&self, variable: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v == variable)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variable {variable}")))
    }

    pub fn index(&self, assignment: &[usize]) -> usize {
        assignment
            .iter()
            .zip(&self.cardinalities)
            .fold(0, |acc, (&a, &k)| acc * k + a)
    }

    pub fn assignment(&self, mut index: usize) -> Vec<usize> {
        let mut a = vec![0; self.cardinalities.len()];
        for (slot, &k) in a.iter_mut().zip(&self.cardinalities).rev() {
            *slot = index % k;
            index /= k;
        }
        a
    }

    pub fn prob(&self, assignment: &[usize]) -> f64 {
        self.probs[self.index(assignment)]
    }

    /// Marginal table over `variables`, in the order given.
    pub fn marginal(&self, variables: &[&str]) -> Result<JointTable> {
        let pos: Vec<usize> = variables.iter().map(|v| self.position(v)).collect::<Result<_>>()?;
        let mut out = JointTable::zeros(
            variables.iter().map(|v| v.to_string()).collect(),
            pos.iter().map(|&p| self.cardinalities[p]).collect(),
        );
        for (i, &p) in self.probs.iter().enumerate() {
            let a = self.assignment(i);
            let sub: Vec<usize> = pos.iter().map(|&k| a[k]).collect();
            let j = out.index(&sub);
            out.probs[j] += p;
        }
        Ok(out)
    }

    /// Total probability of the cells matching every `(variable, value)` pair.
    pub fn mass(&self, event: &[(&str, usize)]) -> Result<f64> {
        let pos: Vec<(usize, usize)> = event
            .iter()
            .map(|&(v, x)| self.position(v).map(|p| (p, x)))
            .collect::<Result<_>>()?;
        Ok(self
            .probs
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let a = self.assignment(*i);
                pos.iter().all(|&(p, x)| a[p] == x)
            })
            .map(|(_, p)| p)
            .sum())
    }

    /// `P(event | given)`, or `None` when the conditioning event has zero mass.
    pub fn conditional(&self, event: &[(&str, usize)], given: &[(&str, usize)]) -> Result<Option<f64>> {
        let denominator = self.mass(given)?;
        if denominator <= 0.0 {
            return Ok(None);
        }
        let joint: Vec<(&str, usize)> = event.iter().chain(given).copied().collect();
        Ok(Some(self.mass(&joint)? / denominator))
    }
}

/// Exact joint table of every period of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactTables {
    pub periods: BTreeMap<i32, JointTable>,
}

impl ExactTables {
    pub fn period(&self, period: i32) -> Result<&JointTable> {
        self.periods
            .get(&period)
            .ok_or_else(|| Error::InvalidArgument(format!("no table for period {period}")))
    }
}

/// Exact per-period joint distribution of one sample of a scenario over the
/// patient intercept (`patient_effect`, index 0 is the negative point), the
/// latent class (`latent`, domain shift only), every observed feature and
/// `outcome`.
pub fn enumerate_exact(scenario: &ShiftScenario) -> Result<ExactTables> {
    let law = scenario.law()?;
    let d = scenario.n_features;
    let states = 2u128 * law.latent_dim as u128 * 2 * (1u128 << d.min(127));
    if d >= 127 || states > MAX_STATES {
        return Err(Error::StateSpaceTooLarge {
            states: if d >= 127 { u128::MAX } else { states },
            limit: MAX_STATES,
        });
    }
    let names = scenario.feature_names();
    let domain = law.latent_dim > 1;
    let mut variables = vec!["patient_effect".to_string()];
    let mut cardinalities = vec![2];
    if domain {
        variables.push("latent".into());
        cardinalities.push(law.latent_dim);
    }
    variables.extend(names.iter().cloned());
    cardinalities.extend(std::iter::repeat_n(2, d));
    variables.push("outcome".into());
    cardinalities.push(2);

    let mut periods = BTreeMap::new();
    for (i, period) in scenario.periods().into_iter().enumerate() {
        let mut table = JointTable::zeros(variables.clone(), cardinalities.clone());
        for (u_idx, u) in [-law.patient_effect, law.patient_effect].into_iter().enumerate() {
            for latent in 0..law.latent_dim {
                let w = 0.5 / law.latent_dim as f64;
                for bits in 0u64..(1 << d) {
                    let drawn = |j: usize| bits >> j & 1 == 1;
                    let observed = |j: usize| drawn(j) && !law.hidden(j, &drawn);
                    for y in [false, true] {
                        let features_given = |outcome: bool| -> f64 {
                            (0..d)
                                .map(|j| {
                                    let q = law.feature_prob(i, j, latent, outcome);
                                    if drawn(j) {
                                        q
                                    } else {
                                        1.0 - q
                                    }
                                })
                                .product()
                        };
                        let p_y = |py: f64| if y { py } else { 1.0 - py };
                        let p = if law.outcome_first() {
                            p_y(law.outcome_prob(i, u, latent, &|_| false)) * features_given(y)
                        } else {
                            features_given(false) * p_y(law.outcome_prob(i, u, latent, &observed))
                        };
                        let mut a = vec![u_idx];
                        if domain {
                            a.push(latent);
                        }
                        a.extend((0..d).map(|j| observed(j) as usize));
                        a.push(y as usize);
                        let k = table.index(&a);
                        table.probs[k] += w * p;
                    }
                }
            }
        }
        periods.insert(period, table);
    }
    Ok(ExactTables { periods })
}

/// Two-period joint table over binary `(B, C, Y)` satisfying the four
/// sufficient conditions for recalibration by `P_t(Y | C) / P_{t-1}(Y | C)`:
/// fixed `P(Y)`, fixed `P(B, C)`, fixed `P(Y | B)` and `B ⊥ C | Y`.
///
/// With binary `Y`, fixed `P(B, C)` and a change in `P(C | Y)` force `B` to be
/// independent of `(C, Y)`, so `B` has its own marginal `p_b`. `C | Y` moves by
/// `delta_y1` for `Y = 1` and by the offsetting amount for `Y = 0` that keeps
/// `P(C)` fixed.
pub fn recalibration_instance(
    p_y: f64,
    p_b: f64,
    p_c_given_y: [f64; 2],
    delta_y1: f64,
) -> Result<(JointTable, JointTable)> {
    let open = |p: f64| p > 0.0 && p < 1.0;
    if !open(p_y) || !open(p_b) || !p_c_given_y.iter().all(|&p| open(p)) {
        return Err(Error::InvalidArgument("probabilities must lie in (0, 1)".into()));
    }
    let delta = [-p_y * delta_y1 / (1.0 - p_y), delta_y1];
    let shifted = [p_c_given_y[0] + delta[0], p_c_given_y[1] + delta[1]];
    if !shifted.iter().all(|&p| (0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidArgument("shifted P(C | Y) leaves [0, 1]".into()));
    }
    let build = |c_given_y: [f64; 2]| {
        let mut probs = Vec::with_capacity(8);
        for b in [false, true] {
            for c in [false, true] {
                for y in [false, true] {
                    let pb = if b { p_b } else { 1.0 - p_b };
                    let py = if y { p_y } else { 1.0 - p_y };
                    let q = c_given_y[y as usize];
                    let pc = if c { q } else { 1.0 - q };
                    probs.push(pb * py * pc);
                }
            }
        }
        JointTable::new(vec!["B".into(), "C".into(), "Y".into()], vec![2, 2, 2], probs)
    };
    Ok((build(p_c_given_y)?, build(shifted)?))
}

/// Largest gap over all `(x, y)` with positive mass between `P_t(Y = y | X)`
/// and `P_{t-1}(Y = y | X) P_t(Y = y | C) / P_{t-1}(Y = y | C)`, where `X` is
/// every variable except `outcome` and `C` is `recalibration`.
pub fn recalibration_gap(prev: &JointTable, curr: &JointTable, recalibration: &[&str], outcome: &str) -> Result<f64> {
    let features: Vec<&str> = prev
        .variables
        .iter()
        .map(String::as_str)
        .filter(|v| *v != outcome)
        .collect();
    let x_table = prev.marginal(&features)?;
    let y_card = prev.cardinalities[prev.position(outcome)?];
    let mut gap: f64 = 0.0;
    for i in 0..x_table.probs.len() {
        let a = x_table.assignment(i);
        let x: Vec<(&str, usize)> = features.iter().copied().zip(a.iter().copied()).collect();
        let c: Vec<(&str, usize)> = x.iter().filter(|(v, _)| recalibration.contains(v)).copied().collect();
        for y in 0..y_card {
            let ev = [(outcome, y)];
            let terms = (
                curr.conditional(&ev, &x)?,
                prev.conditional(&ev, &x)?,
                curr.conditional(&ev, &c)?,
                prev.conditional(&ev, &c)?,
            );
            if let (Some(ct), Some(pt), Some(cc), Some(pc)) = terms {
                if pc > 0.0 {
                    gap = gap.max((ct - pt * cc / pc).abs());
                }
            }
        }
    }
    Ok(gap)
}
