//! Run configuration: JSON document, validated before any computation.

use std::path::Path;

use ccml::finsler_seq::SequenceConfig;
use ccml::gallery;
use ccml::smoothmap::{ChartDomain, PolyField, Term};
use ccml::structure::{FiberNorm, SubFinslerStructure};
use serde::{Deserialize, Serialize};

/// Schema or usage problem, reported with exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub structure: StructureSpec,
    /// Replaces the structure's chart box.
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub chart_box: Option<BoxSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub info: InfoParams,
    #[serde(default)]
    pub sequence: SequenceParams,
    #[serde(default)]
    pub distance: DistanceParams,
    #[serde(default)]
    pub speed: SpeedParams,
    #[serde(default)]
    pub validate: ValidateParams,
    /// `(x, v)` pairs for `norm` and `approx`.
    #[serde(default)]
    pub probes: Vec<Probe>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StructureSpec {
    Builtin(String),
    Custom(CustomStructure),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomStructure {
    pub name: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// One polynomial literal per generator, `n` components each.
    pub fields: Vec<Vec<Vec<Term>>>,
    pub sigma: SigmaSpec,
    pub declared_step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum SigmaSpec {
    /// Constant Euclidean norm.
    Euclidean,
    /// `d·d` row-major Gram entries.
    Hilbert { gram: Vec<Vec<Term>> },
    /// `p = null` for the max norm.
    WeightedP {
        p: Option<f64>,
        weights: Vec<Vec<Term>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfoParams {
    pub samples: usize,
    pub step_max: usize,
    pub grid_step: f64,
    pub r_cap: f64,
}

impl Default for InfoParams {
    fn default() -> Self {
        Self {
            samples: 64,
            step_max: 4,
            grid_step: 0.05,
            r_cap: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceParams {
    pub n_max: usize,
    pub samples: usize,
    /// Lattice spacing of the `G_n` and rank-radius scans.
    pub grid_step: f64,
    pub cover: SequenceConfig,
}

impl Default for SequenceParams {
    fn default() -> Self {
        Self {
            n_max: 6,
            samples: 100,
            grid_step: 0.02,
            cover: SequenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceParams {
    pub pairs: Vec<Pair>,
    /// Levels `1..=n_max` tabulated on the lattice.
    pub n_max: usize,
    pub h: f64,
    pub stencil_radius: i64,
    pub k: usize,
    pub restarts: usize,
}

impl Default for DistanceParams {
    fn default() -> Self {
        Self {
            pairs: Vec::new(),
            n_max: 2,
            h: 0.1,
            stencil_radius: 2,
            k: 32,
            restarts: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeedParams {
    pub x0: Option<Vec<f64>>,
    /// Piecewise-constant controls on `[0, 1]`.
    pub controls: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub h: Vec<f64>,
    pub k: usize,
    pub restarts: usize,
    /// Largest accepted relative error of the difference quotient.
    pub tol: f64,
}

impl Default for SpeedParams {
    fn default() -> Self {
        Self {
            x0: None,
            controls: Vec::new(),
            t: vec![0.1, 0.35, 0.6],
            h: vec![1e-2],
            k: 8,
            restarts: 2,
            tol: 0.03,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateParams {
    /// Gallery names; empty means the configured structure alone.
    pub gallery: Vec<String>,
    pub samples: usize,
    pub n_max: usize,
    pub lsc_sequences: usize,
}

impl Default for ValidateParams {
    fn default() -> Self {
        Self {
            gallery: Vec::new(),
            samples: 200,
            n_max: 2,
            lsc_sequences: 50,
        }
    }
}

/// Reads and validates a config file.
pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError(format!("config error at `{path}`: {}", e.inner()))
    })?;
    cfg.check()?;
    Ok(cfg)
}

fn bad(path: &str, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("config error at `{path}`: {msg}"))
}

impl RunConfig {
    fn check(&self) -> Result<(), ConfigError> {
        let q = &self.sequence;
        if q.n_max == 0 || q.samples == 0 || !(q.grid_step > 0.0) {
            return Err(bad(
                "sequence",
                "n_max, samples and grid_step must be positive",
            ));
        }
        let d = &self.distance;
        if !(d.h > 0.0) || d.stencil_radius < 1 || d.k == 0 || d.restarts == 0 {
            return Err(bad(
                "distance",
                "h, stencil_radius, k and restarts must be positive",
            ));
        }
        if self.speed.h.iter().any(|h| !(*h > 0.0))
            || self.speed.t.iter().any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(bad("speed", "t must lie in [0, 1] and h must be positive"));
        }
        if !(self.info.grid_step > 0.0) || self.info.step_max == 0 {
            return Err(bad("info", "grid_step and step_max must be positive"));
        }
        Ok(())
    }

    /// Builds and validates the structure, applying the box override.
    pub fn structure(&self) -> Result<SubFinslerStructure, ConfigError> {
        let s = match &self.structure {
            StructureSpec::Builtin(name) => build_builtin(name)?,
            StructureSpec::Custom(c) => c.build()?,
        };
        match &self.chart_box {
            None => Ok(s),
            Some(b) => {
                let domain = ChartDomain::new(b.lower.clone(), b.upper.clone())
                    .map_err(|e| bad("box", e))?;
                SubFinslerStructure::new(
                    s.name.clone(),
                    domain,
                    s.fields().to_vec(),
                    s.sigma.clone(),
                    s.declared_step,
                )
                .map_err(|e| bad("box", e))
            }
        }
    }
}

/// A gallery name, with `euclidean(n)` accepted for any `n`.
pub fn build_builtin(name: &str) -> Result<SubFinslerStructure, ConfigError> {
    gallery::builtin(name)
        .map(|e| e.structure)
        .map_err(|e| bad("structure", e))
}

impl CustomStructure {
    fn build(&self) -> Result<SubFinslerStructure, ConfigError> {
        let n = self.lower.len();
        let domain = ChartDomain::new(self.lower.clone(), self.upper.clone())
            .map_err(|e| bad("structure", e))?;
        let fields = self
            .fields
            .iter()
            .enumerate()
            .map(|(i, f)| {
                PolyField::from_literal(n, f.clone())
                    .map_err(|e| bad(&format!("structure.fields[{i}]"), e))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let d = fields.len();
        let sigma = match &self.sigma {
            SigmaSpec::Euclidean => FiberNorm::euclidean(n, d),
            SigmaSpec::Hilbert { gram } => FiberNorm::Hilbert {
                gram: PolyField::from_literal(n, gram.clone())
                    .map_err(|e| bad("structure.sigma.hilbert.gram", e))?,
            },
            SigmaSpec::WeightedP { p, weights } => FiberNorm::WeightedPNorm {
                p: p.unwrap_or(f64::INFINITY),
                weights: PolyField::from_literal(n, weights.clone())
                    .map_err(|e| bad("structure.sigma.weighted_p.weights", e))?,
            },
        };
        SubFinslerStructure::new(self.name.clone(), domain, fields, sigma, self.declared_step)
            .map_err(|e| bad("structure", e))
    }
}
