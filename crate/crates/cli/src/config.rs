//! Run configuration: a JSON file merged with command-line overrides.

use lkshape::inference::{Family, OptimizerConfig};
use lkshape::polyalg::SeriesControl;
use lkshape::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where Θ comes from. Serialized as `"identity"` or a file path.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ThetaSource {
    #[default]
    Identity,
    File(PathBuf),
}

impl TryFrom<String> for ThetaSource {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.trim() {
            "" => Err("empty Θ source".into()),
            "identity" => Ok(ThetaSource::Identity),
            path => Ok(ThetaSource::File(PathBuf::from(path))),
        }
    }
}

impl From<ThetaSource> for String {
    fn from(t: ThetaSource) -> String {
        match t {
            ThetaSource::Identity => "identity".into(),
            ThetaSource::File(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub families: Vec<Family>,
    pub theta: ThetaSource,
    pub series: SeriesControl,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            families: Vec::new(),
            theta: ThetaSource::Identity,
            series: SeriesControl::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            output: None,
        }
    }
}

/// Values given on the command line; each one replaces the config value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub families: Vec<Family>,
    pub theta: Option<PathBuf>,
    pub max_degree: Option<usize>,
    pub tail_tol: Option<f64>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("config: {e}"),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn apply(mut self, o: Overrides) -> Self {
        if o.input.is_some() {
            self.input = o.input;
        }
        if !o.families.is_empty() {
            self.families = o.families;
        }
        if let Some(t) = o.theta {
            self.theta = ThetaSource::File(t);
        }
        if let Some(d) = o.max_degree {
            self.series.max_degree = d;
            self.series.degree_cap = self.series.degree_cap.max(d);
        }
        if let Some(t) = o.tail_tol {
            self.series.tail_rel_tol = t;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.output.is_some() {
            self.output = o.output;
        }
        self
    }

    /// Requested families, or all three named ones when none were given.
    pub fn families_or_default(&self) -> Vec<Family> {
        if self.families.is_empty() {
            vec![Family::Gaussian, Family::KotzT2, Family::KotzT3]
        } else {
            self.families.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.series.validate().map_err(as_config)?;
        self.optimizer.validate().map_err(as_config)?;
        let mut seen = Vec::new();
        for f in &self.families {
            if seen.contains(f) {
                return Err(Error::Config(format!("family '{f}' requested twice")));
            }
            seen.push(*f);
        }
        Ok(())
    }

    pub fn input(&self) -> Result<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| Error::Config("no input file given (--input or config 'input')".into()))
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}
