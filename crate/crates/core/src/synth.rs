//! Synthetic panel cohorts with a planted shift and their ground truth.
//!
//! Features are binary. Every patient carries a two-point latent intercept
//! `±patient_effect` shared by all of their samples. The first period follows
//! the reference law and every later period follows the shifted law.
//!
//! * `none`: one law for all periods.
//! * `label_shift`: `Y` is drawn first and `X | Y` is fixed; prevalence moves
//!   from `prevalence` to `prevalence + magnitude`.
//! * `domain_shift`: a patient-level latent class `U` drives both `Y` and the
//!   informative features; a `magnitude` fraction of the informative features
//!   is masked to zero after the first period.
//! * `conditional_shift`: `Y | X` is logistic and the coefficient of the
//!   designated feature (always feature 0) is scaled by `1 - 2 magnitude`
//!   (flip) or `1 + 2 magnitude` (amplify). With a subgroup the change is
//!   confined to samples whose subgroup feature is 1. The designated feature
//!   is then only observed inside the subgroup, and there the outcome follows
//!   it with logit `-strength (2 x0 - 1)` before the shift.

use crate::error::{Error, Result};
use crate::models::logistic::sigmoid;
use crate::panel::{split_patients_stratified, PanelDataset, PatientPanel, Sample, SplitFractions, Vocabulary};
use crate::rng;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Largest number of informative features accepted; the ground truth is
/// computed by enumerating them.
pub const MAX_INFORMATIVE: usize = 16;

/// Frequency of the designated feature of conditional-shift scenarios.
pub const DESIGNATED_FREQUENCY: f64 = 0.3;

/// Effect of the designated feature before the shift.
pub const DESIGNATED_EFFECT: f64 = 1.5;

/// Latent-class spacing on the logit scale for domain-shift scenarios.
const LATENT_SPREAD: f64 = 1.5;
const MARKER_ON: f64 = 0.6;
const MARKER_OFF: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    LabelShift,
    DomainShift,
    ConditionalShift,
}

impl ShiftKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::None => "none",
            ShiftKind::LabelShift => "label_shift",
            ShiftKind::DomainShift => "domain_shift",
            ShiftKind::ConditionalShift => "conditional_shift",
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShiftKind::None),
            "label_shift" | "label" => Ok(ShiftKind::LabelShift),
            "domain_shift" | "domain" => Ok(ShiftKind::DomainShift),
            "conditional_shift" | "conditional" => Ok(ShiftKind::ConditionalShift),
            other => Err(Error::InvalidArgument(format!("unknown shift kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalMode {
    #[default]
    Flip,
    Amplify,
}

/// Feature-defined region that confines a conditional shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subgroup {
    /// Index of the indicator feature; must not be the designated feature 0.
    pub feature: usize,
    /// Probability that the indicator is 1.
    pub frequency: f64,
    /// Logit slope of the designated feature inside the subgroup.
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftScenario {
    pub kind: ShiftKind,
    /// Number of latent classes for domain shift.
    pub latent_dim: usize,
    pub n_features: usize,
    /// Features with a nonzero effect; they are the first ones.
    pub n_informative: usize,
    pub n_patients: usize,
    pub samples_per_period: usize,
    pub n_periods: usize,
    pub first_period: i32,
    pub magnitude: f64,
    /// Outcome prevalence of the reference law. With a subgroup it applies to
    /// samples outside the subgroup.
    pub prevalence: f64,
    /// Half-distance of the two-point patient intercept on the logit scale.
    pub patient_effect: f64,
    pub subgroup: Option<Subgroup>,
    pub conditional_mode: ConditionalMode,
    /// Symmetric label flip probability applied after the first period.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for ShiftScenario {
    fn default() -> Self {
        Self {
            kind: ShiftKind::None,
            latent_dim: 2,
            n_features: 10,
            n_informative: 4,
            n_patients: 1000,
            samples_per_period: 12,
            n_periods: 2,
            first_period: 2018,
            magnitude: 1.0,
            prevalence: 0.1,
            patient_effect: 1.0,
            subgroup: None,
            conditional_mode: ConditionalMode::Flip,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

/// Conjunction of `feature == value` conditions. An empty conjunction is the
/// whole population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Predicate {
    Nothing,
    Conjunction { conditions: Vec<(String, f64)> },
}

impl Predicate {
    pub fn everything() -> Self {
        Predicate::Conjunction { conditions: Vec::new() }
    }

    pub fn contains(&self, sample: &Sample, vocabulary: &Vocabulary) -> bool {
        match self {
            Predicate::Nothing => false,
            Predicate::Conjunction { conditions } => conditions
                .iter()
                .all(|(name, v)| vocabulary.get(name).map_or(*v == 0.0, |j| sample.value(j) == *v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGroundTruth {
    pub kind: ShiftKind,
    /// Samples whose outcome law changes.
    pub affected: Predicate,
    /// Exact outcome prevalence per period.
    pub prevalence: BTreeMap<i32, f64>,
    /// Masked features for domain shift, the designated feature for
    /// conditional shift.
    pub shifted_features: Vec<String>,
    pub scenario: ShiftScenario,
}

impl ScenarioGroundTruth {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Derived parameters of a scenario shared by the sampler and the exact
/// enumeration.
#[derive(Debug, Clone)]
pub(crate) struct Law {
    pub kind: ShiftKind,
    pub frequencies: Vec<f64>,
    pub effects: Vec<f64>,
    /// Logit intercept per period index.
    pub intercepts: Vec<f64>,
    pub latent_dim: usize,
    pub n_masked: usize,
    pub n_informative: usize,
    pub patient_effect: f64,
    pub subgroup: Option<Subgroup>,
    pub designated_factor: f64,
    pub label_noise: f64,
}

impl ShiftScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleScenario(m));
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad(format!("prevalence {} outside (0, 1)", self.prevalence));
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return bad(format!("magnitude {} must be finite and nonnegative", self.magnitude));
        }
        if self.n_patients == 0 || self.n_features == 0 || self.n_periods == 0 {
            return bad("patients, features and periods must be positive".into());
        }
        if !(1..=12).contains(&self.samples_per_period) {
            return bad("samples per period must lie in 1..=12".into());
        }
        if self.n_informative > self.n_features || self.n_informative > MAX_INFORMATIVE {
            return bad(format!(
                "n_informative must not exceed n_features or {MAX_INFORMATIVE}"
            ));
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return bad("label noise must lie in [0, 0.5]".into());
        }
        if !(self.patient_effect >= 0.0 && self.patient_effect.is_finite()) {
            return bad("patient effect must be finite and nonnegative".into());
        }
        match self.kind {
            ShiftKind::LabelShift => {
                let after = self.prevalence + self.magnitude;
                if !(after > 0.0 && after < 1.0) {
                    return bad(format!(
                        "prevalence {} plus magnitude {} leaves (0, 1)",
                        self.prevalence, self.magnitude
                    ));
                }
            }
            ShiftKind::DomainShift => {
                if self.latent_dim < 2 {
                    return bad("domain shift needs at least two latent classes".into());
                }
                if self.magnitude > 1.0 {
                    return bad("domain shift magnitude is a fraction in [0, 1]".into());
                }
                if self.n_informative == 0 {
                    return bad("domain shift needs informative features".into());
                }
            }
            ShiftKind::ConditionalShift | ShiftKind::None => {}
        }
        if let Some(g) = self.subgroup {
            if self.kind != ShiftKind::ConditionalShift {
                return bad("a subgroup applies only to conditional shift".into());
            }
            if g.feature == 0 || g.feature >= self.n_features {
                return bad("subgroup feature must be in 1..n_features".into());
            }
            if !(g.frequency > 0.0 && g.frequency < 1.0) || !g.strength.is_finite() {
                return bad("subgroup frequency must lie in (0, 1) with finite strength".into());
            }
        }
        if self.kind == ShiftKind::ConditionalShift && self.n_informative == 0 && self.subgroup.is_none() {
            return bad("conditional shift needs an informative designated feature or a subgroup".into());
        }
        Ok(())
    }

    pub fn periods(&self) -> Vec<i32> {
        (0..self.n_periods as i32).map(|i| self.first_period + i).collect()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let width = (self.n_features.saturating_sub(1)).to_string().len().max(2);
        (0..self.n_features).map(|j| format!("f{j:0width$}")).collect()
    }

    pub(crate) fn law(&self) -> Result<Law> {
        self.validate()?;
        let mut r = rng::rng(rng::derive(self.seed, "law"));
        let mut frequencies: Vec<f64> = (0..self.n_features).map(|_| r.random_range(0.1..0.5)).collect();
        let effects: Vec<f64> = (0..self.n_features)
            .map(|j| {
                let size: f64 = r.random_range(0.5..1.5);
                match j {
                    0 => DESIGNATED_EFFECT,
                    j if j < self.n_informative && j % 2 == 1 => -size,
                    j if j < self.n_informative => size,
                    _ => 0.0,
                }
            })
            .collect();
        if self.kind == ShiftKind::ConditionalShift {
            frequencies[0] = DESIGNATED_FREQUENCY;
        }
        if let Some(g) = self.subgroup {
            frequencies[g.feature] = g.frequency;
        }
        let designated_factor = match self.conditional_mode {
            ConditionalMode::Flip => 1.0 - 2.0 * self.magnitude,
            ConditionalMode::Amplify => 1.0 + 2.0 * self.magnitude,
        };
        let n_masked = match self.kind {
            ShiftKind::DomainShift => (self.magnitude * self.n_informative as f64).round() as usize,
            _ => 0,
        };
        let mut law = Law {
            kind: self.kind,
            frequencies,
            effects,
            intercepts: vec![0.0; self.n_periods],
            latent_dim: if self.kind == ShiftKind::DomainShift { self.latent_dim } else { 1 },
            n_masked,
            n_informative: self.n_informative,
            patient_effect: self.patient_effect,
            subgroup: self.subgroup,
            designated_factor,
            label_noise: self.label_noise,
        };
        let reference = calibrate(&law, self.prevalence);
        let shifted = match self.kind {
            ShiftKind::LabelShift => calibrate(&law, self.prevalence + self.magnitude),
            _ => reference,
        };
        law.intercepts = (0..self.n_periods).map(|i| if i == 0 { reference } else { shifted }).collect();
        Ok(law)
    }
}

impl Law {
    pub fn shifted(&self, period_index: usize) -> bool {
        period_index > 0 && self.kind != ShiftKind::None
    }

    pub fn in_subgroup(&self, x: &impl Fn(usize) -> bool) -> bool {
        self.subgroup.is_some_and(|g| x(g.feature))
    }

    /// Features that enter the outcome law or depend on it.
    pub fn relevant_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = (0..self.n_informative).collect();
        if let Some(g) = self.subgroup {
            if !f.contains(&g.feature) {
                f.push(g.feature);
            }
        }
        f.sort_unstable();
        f
    }

    /// P(x_j = 1) given the latent class and the outcome.
    pub fn feature_prob(&self, period_index: usize, j: usize, latent: usize, y: bool) -> f64 {
        match self.kind {
            ShiftKind::LabelShift if j < self.n_informative => {
                let q = self.frequencies[j];
                sigmoid((q / (1.0 - q)).ln() + if y { self.effects[j] } else { 0.0 })
            }
            ShiftKind::DomainShift if j < self.n_informative => {
                if self.shifted(period_index) && j < self.n_masked {
                    0.0
                } else if j % self.latent_dim == latent {
                    MARKER_ON
                } else {
                    MARKER_OFF
                }
            }
            _ => self.frequencies[j],
        }
    }

    /// P(Y = 1) before label noise, given the patient intercept, the latent
    /// class and the features.
    pub fn clean_outcome_prob(&self, period_index: usize, u: f64, latent: usize, x: &impl Fn(usize) -> bool) -> f64 {
        let c = self.intercepts[period_index];
        match self.kind {
            ShiftKind::LabelShift => sigmoid(c + u),
            ShiftKind::DomainShift => {
                let centre = (self.latent_dim - 1) as f64 / 2.0;
                sigmoid(c + LATENT_SPREAD * (latent as f64 - centre) + u)
            }
            ShiftKind::None | ShiftKind::ConditionalShift => {
                let factor = if self.shifted(period_index) { self.designated_factor } else { 1.0 };
                if self.in_subgroup(x) {
                    let g = self.subgroup.expect("in subgroup");
                    let sign = if x(0) { 1.0 } else { -1.0 };
                    return sigmoid(-g.strength * factor * sign + u);
                }
                let mut logit = c + u;
                for j in 0..self.n_informative {
                    if x(j) {
                        logit += if j == 0 { self.effects[0] * factor } else { self.effects[j] };
                    }
                }
                sigmoid(logit)
            }
        }
    }

    pub fn outcome_prob(&self, period_index: usize, u: f64, latent: usize, x: &impl Fn(usize) -> bool) -> f64 {
        let p = self.clean_outcome_prob(period_index, u, latent, x);
        if period_index > 0 {
            p * (1.0 - self.label_noise) + (1.0 - p) * self.label_noise
        } else {
            p
        }
    }

    /// Whether the outcome is drawn before the features.
    pub fn outcome_first(&self) -> bool {
        self.kind == ShiftKind::LabelShift
    }

    /// Whether a drawn feature is hidden: the designated feature is only
    /// observed inside the subgroup.
    pub fn hidden(&self, j: usize, x: &impl Fn(usize) -> bool) -> bool {
        j == 0 && self.subgroup.is_some_and(|g| !x(g.feature))
    }

    /// Exact P(Y = 1) at a period, enumerating the relevant features.
    pub fn prevalence(&self, period_index: usize) -> f64 {
        self.prevalence_given(period_index, None)
    }

    /// Exact P(Y = 1) at a period, optionally conditioned on the subgroup
    /// indicator.
    pub fn prevalence_given(&self, period_index: usize, in_subgroup: Option<bool>) -> f64 {
        let features = self.relevant_features();
        let mut total = 0.0;
        let mut mass = 0.0;
        for u in [-self.patient_effect, self.patient_effect] {
            for latent in 0..self.latent_dim {
                let w = 0.5 / self.latent_dim as f64;
                if self.outcome_first() {
                    total += w * self.outcome_prob(period_index, u, latent, &|_| false);
                    mass += w;
                    continue;
                }
                for bits in 0u32..(1 << features.len()) {
                    let drawn = |j: usize| features.iter().position(|&f| f == j).is_some_and(|k| bits >> k & 1 == 1);
                    if in_subgroup.is_some_and(|g| g != self.in_subgroup(&drawn)) {
                        continue;
                    }
                    let x = |j: usize| drawn(j) && !self.hidden(j, &drawn);
                    let mut p = w;
                    for (k, &j) in features.iter().enumerate() {
                        let q = self.feature_prob(period_index, j, latent, false);
                        p *= if bits >> k & 1 == 1 { q } else { 1.0 - q };
                    }
                    total += p * self.outcome_prob(period_index, u, latent, &x);
                    mass += p;
                }
            }
        }
        total / mass
    }
}

/// Reference-law intercept that yields prevalence `target` outside the
/// subgroup, whose law does not use the intercept.
fn calibrate(law: &Law, target: f64) -> f64 {
    let mut probe = law.clone();
    probe.label_noise = 0.0;
    let outside = law.subgroup.map(|_| false);
    let mut lo = -40.0;
    let mut hi = 40.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        probe.intercepts = vec![mid];
        if probe.prevalence_given(0, outside) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn draw_panel(scenario: &ShiftScenario, law: &Law, periods: &[i32], id: String, seed: u64, index: u64) -> PatientPanel {
    let mut r = rng::stream(seed, index);
    let u = if r.random::<bool>() { law.patient_effect } else { -law.patient_effect };
    let latent = r.random_range(0..law.latent_dim);
    let d = scenario.n_features;
    let mut out = BTreeMap::new();
    for (i, &period) in periods.iter().enumerate() {
        let mut samples = Vec::with_capacity(scenario.samples_per_period);
        for month in 1..=scenario.samples_per_period as u8 {
            let mut bits = vec![false; d];
            let y = if law.outcome_first() {
                let y = r.random::<f64>() < law.outcome_prob(i, u, latent, &|_| false);
                for (j, b) in bits.iter_mut().enumerate() {
                    *b = r.random::<f64>() < law.feature_prob(i, j, latent, y);
                }
                y
            } else {
                for (j, b) in bits.iter_mut().enumerate() {
                    *b = r.random::<f64>() < law.feature_prob(i, j, latent, false);
                }
                if law.hidden(0, &|j| bits[j]) {
                    bits[0] = false;
                }
                r.random::<f64>() < law.outcome_prob(i, u, latent, &|j| bits[j])
            };
            let features = bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(j, _)| (j as u32, 1.0))
                .collect();
            samples.push(Sample::new(period, month, features, y as u8));
        }
        out.insert(period, samples);
    }
    PatientPanel {
        patient_id: id,
        split: None,
        periods: out,
    }
}

/// Draw a cohort with stratified splits, and its ground truth.
pub fn generate(scenario: &ShiftScenario) -> Result<(PanelDataset, ScenarioGroundTruth)> {
    let law = scenario.law()?;
    let names = scenario.feature_names();
    let vocabulary = Vocabulary::new(names.clone())?;
    let periods = scenario.periods();
    let width = (scenario.n_patients - 1).to_string().len();
    let patient_seed = rng::derive(scenario.seed, "patients");
    let panels: Vec<PatientPanel> = (0..scenario.n_patients)
        .into_par_iter()
        .map(|p| draw_panel(scenario, &law, &periods, format!("p{p:0width$}"), patient_seed, p as u64))
        .collect();
    let dataset = PanelDataset { vocabulary, panels };
    let dataset = split_patients_stratified(&dataset, SplitFractions::default(), rng::derive(scenario.seed, "split"))?;

    let planted = scenario.kind != ShiftKind::None && scenario.magnitude > 0.0;
    let affected = match (planted, scenario.subgroup) {
        _ if scenario.label_noise > 0.0 && scenario.n_periods > 1 => Predicate::everything(),
        (false, _) => Predicate::Nothing,
        (true, Some(g)) => Predicate::Conjunction {
            conditions: vec![(names[g.feature].clone(), 1.0)],
        },
        (true, None) => Predicate::everything(),
    };
    let shifted_features = match scenario.kind {
        ShiftKind::DomainShift => names[..law.n_masked].to_vec(),
        ShiftKind::ConditionalShift if scenario.n_informative > 0 || scenario.subgroup.is_some() => {
            vec![names[0].clone()]
        }
        _ => Vec::new(),
    };
    let prevalence = periods.iter().enumerate().map(|(i, &t)| (t, law.prevalence(i))).collect();
    let truth = ScenarioGroundTruth {
        kind: scenario.kind,
        affected,
        prevalence,
        shifted_features,
        scenario: scenario.clone(),
    };
    Ok((dataset, truth))
}
