use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_PREDICTORS;
use crate::error::{Error, Result};

/// Grouping factors that can carry a varying intercept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Age,
    Race,
    Time,
    Zip,
}

impl Factor {
    pub const ALL: [Factor; 4] = [Factor::Age, Factor::Race, Factor::Time, Factor::Zip];

    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Age => "age",
            Factor::Race => "race",
            Factor::Time => "time",
            Factor::Zip => "zip",
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Binomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outcome {
    pub likelihood: Likelihood,
    /// Test sensitivity δ.
    pub sensitivity: f64,
    /// Test specificity γ.
    pub specificity: f64,
}

impl Default for Outcome {
    fn default() -> Self {
        Outcome {
            likelihood: Likelihood::Binomial,
            sensitivity: 0.7,
            specificity: 1.0,
        }
    }
}

/// Per-level coefficients of a zip predictor, e.g. race × college.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaryingSlope {
    pub group: Factor,
    pub predictor: String,
}

impl VaryingSlope {
    pub fn label(&self) -> String {
        format!("{}_{}", self.group, self.predictor)
    }
}

/// Prior scales. Fixed effects get normal priors, hyperparameters half-normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub intercept: f64,
    pub fixed: f64,
    pub sd_age: f64,
    pub sd_race: f64,
    pub sd_time: f64,
    pub sd_zip: f64,
    /// Fixed sd shared by varying-slope coefficients.
    pub slope: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            intercept: 5.0,
            fixed: 2.5,
            sd_age: 2.5,
            sd_race: 2.5,
            sd_time: 5.0,
            sd_zip: 2.5,
            slope: 2.5,
        }
    }
}

impl PriorConfig {
    pub fn sd_scale(&self, f: Factor) -> f64 {
        match f {
            Factor::Age => self.sd_age,
            Factor::Race => self.sd_race,
            Factor::Time => self.sd_time,
            Factor::Zip => self.sd_zip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        FieldError {
            field: field.to_owned(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub outcome: Outcome,
    /// `male` and/or names of zip-level predictor columns.
    #[serde(default)]
    pub fixed_effects: Vec<String>,
    #[serde(default)]
    pub varying_intercepts: Vec<Factor>,
    #[serde(default)]
    pub varying_slopes: Vec<VaryingSlope>,
    /// Marks the zip intercept as a regression on the zip predictors plus a
    /// zip-level error. Requires `zip` among the varying intercepts.
    #[serde(default)]
    pub zip_regression: bool,
    #[serde(default)]
    pub priors: PriorConfig,
}

impl ModelSpec {
    pub fn intercept_only() -> Self {
        ModelSpec {
            name: "intercept".into(),
            outcome: Outcome::default(),
            fixed_effects: Vec::new(),
            varying_intercepts: Vec::new(),
            varying_slopes: Vec::new(),
            zip_regression: false,
            priors: PriorConfig::default(),
        }
    }

    /// Sex, every zip predictor, and varying age, race, week and zip effects.
    pub fn model_a() -> Self {
        let mut fixed = vec!["male".to_owned()];
        fixed.extend(DEFAULT_PREDICTORS.iter().map(|s| s.to_string()));
        ModelSpec {
            name: "A".into(),
            outcome: Outcome::default(),
            fixed_effects: fixed,
            varying_intercepts: Factor::ALL.to_vec(),
            varying_slopes: Vec::new(),
            zip_regression: true,
            priors: PriorConfig::default(),
        }
    }

    /// Model A plus race-specific college coefficients.
    pub fn model_b() -> Self {
        let mut s = Self::model_a();
        s.name = "B".into();
        s.varying_slopes.push(VaryingSlope {
            group: Factor::Race,
            predictor: "college".into(),
        });
        s
    }

    /// Model A without the zip varying intercept; zip predictors stay as
    /// fixed effects.
    pub fn model_c() -> Self {
        let mut s = Self::model_a();
        s.name = "C".into();
        s.varying_intercepts.retain(|f| *f != Factor::Zip);
        s.zip_regression = false;
        s
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "A" => Some(Self::model_a()),
            "B" => Some(Self::model_b()),
            "C" => Some(Self::model_c()),
            _ => None,
        }
    }

    /// Replaces the zip predictors with `predictors`, keeping `male` if
    /// present. Used when the geo table carries a different column set.
    pub fn with_predictors(mut self, predictors: &[String]) -> Self {
        let male = self.has_male();
        self.fixed_effects = predictors.to_vec();
        if male {
            self.fixed_effects.insert(0, "male".into());
        }
        self
    }

    pub fn has_male(&self) -> bool {
        self.fixed_effects.iter().any(|f| f == "male")
    }

    pub fn zip_predictors(&self) -> impl Iterator<Item = &str> {
        self.fixed_effects
            .iter()
            .map(String::as_str)
            .filter(|f| *f != "male")
    }

    pub fn has_varying(&self, f: Factor) -> bool {
        self.varying_intercepts.contains(&f)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Field-level checks; every problem found is reported at once.
    pub fn check(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let (d, g) = (self.outcome.sensitivity, self.outcome.specificity);
        if !(d > 0.0 && d <= 1.0) {
            errs.push(FieldError::new("outcome.sensitivity", "must be in (0, 1]"));
        }
        if !(g > 0.0 && g <= 1.0) {
            errs.push(FieldError::new("outcome.specificity", "must be in (0, 1]"));
        }
        if d.is_finite() && g.is_finite() && d <= 1.0 - g {
            errs.push(FieldError::new(
                "outcome",
                format!("sensitivity must exceed 1 - specificity (got {d} <= {})", 1.0 - g),
            ));
        }

        let mut seen = BTreeSet::new();
        for f in &self.fixed_effects {
            if f.trim().is_empty() {
                errs.push(FieldError::new("fixed_effects", "empty name"));
            } else if !seen.insert(f.as_str()) {
                errs.push(FieldError::new("fixed_effects", format!("`{f}` listed twice")));
            }
        }
        let mut seen = BTreeSet::new();
        for f in &self.varying_intercepts {
            if !seen.insert(*f) {
                errs.push(FieldError::new(
                    "varying_intercepts",
                    format!("`{f}` listed twice"),
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for s in &self.varying_slopes {
            if s.predictor == "male" {
                errs.push(FieldError::new(
                    "varying_slopes",
                    "slopes apply to zip-level predictors, not `male`",
                ));
            }
            if !seen.insert((s.group, s.predictor.as_str())) {
                errs.push(FieldError::new(
                    "varying_slopes",
                    format!("`{}` listed twice", s.label()),
                ));
            }
        }
        if self.zip_regression && !self.has_varying(Factor::Zip) {
            errs.push(FieldError::new(
                "zip_regression",
                "requires `zip` among varying_intercepts",
            ));
        }
        let p = &self.priors;
        for (name, v) in [
            ("priors.intercept", p.intercept),
            ("priors.fixed", p.fixed),
            ("priors.sd_age", p.sd_age),
            ("priors.sd_race", p.sd_race),
            ("priors.sd_time", p.sd_time),
            ("priors.sd_zip", p.sd_zip),
            ("priors.slope", p.slope),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(FieldError::new(name, "prior scale must be positive"));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.check();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(errs))
        }
    }
}
