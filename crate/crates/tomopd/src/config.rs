//! Run configuration: one JSON document per experiment.
//!
//! Command-line flags override the matching fields after the file is
//! parsed; the resolved document is written next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tomopd_core::phantom::{builtin_phantom, Bounds, PhantomSpec, Shape};
use tomopd_core::problems::{DtvConfig, HighResConfig, LsqTikOptions};
use tomopd_core::{GridSpec, PowerConfig, ScanGeometry, StepConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: at `{field}`: {message}")]
    Parse { path: PathBuf, field: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Short form of a scan sized to the grid (see `ScanGeometry::fitted`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedScan {
    pub n_views: usize,
    /// Degrees.
    pub arc_half_angle: f64,
    pub n_bins: usize,
}

/// Either a built-in catalog entry or an explicit shape list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapes: Option<Vec<Shape>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
    /// Sub-samples per voxel edge when rasterizing the reference image.
    #[serde(default = "one")]
    pub supersample: usize,
}

fn one() -> usize {
    1
}

impl PhantomConfig {
    pub fn resolve(&self) -> Result<PhantomSpec, ConfigError> {
        let spec = match (&self.builtin, &self.shapes) {
            (Some(name), None) => builtin_phantom(name)
                .ok_or_else(|| ConfigError::Invalid(format!("phantom.builtin: unknown phantom {name:?}")))?,
            (None, Some(shapes)) => PhantomSpec { shapes: shapes.clone(), bounds: self.bounds.clone() },
            _ => return Err(ConfigError::Invalid("phantom: give exactly one of `builtin` and `shapes`".into())),
        };
        spec.validate().map_err(|e| ConfigError::Invalid(format!("phantom: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Photons per detector bin.
    pub fluence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dtv,
    LsqTik,
    GdFirstIterate,
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Beta,
    Gamma,
    Rho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Second stage of the two-stage method. The top-level `grid` is the
/// low-resolution latent grid; the refinement grid is that grid refined by
/// `factors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStageSection {
    pub factors: Vec<usize>,
    pub high: HighResConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdConfig {
    /// Defaults to `1/‖R X‖²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
}

fn default_cutoff() -> f64 {
    0.5
}

fn default_n_iter() -> usize {
    1000
}

fn default_log_every() -> usize {
    10
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_thetas() -> Vec<f64> {
    (-5..=5).map(|k| 5.0 * k as f64).collect()
}

fn default_window() -> [f64; 2] {
    [0.0, 0.6]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    /// Full scan description; alternative to `scan`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<ScanGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<FittedScan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomConfig>,
    /// Measured sinogram (`.vol`); replaces simulation from `phantom`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Reference image (`.vol`) for image RMSE; defaults to the rasterized phantom.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtv: Option<DtvConfig>,
    #[serde(default)]
    pub steps: StepConfig,
    #[serde(default = "default_n_iter")]
    pub n_iter: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_rmse_target: Option<f64>,
    #[serde(default)]
    pub power: PowerConfig,
    #[serde(default)]
    pub lsq_tik: LsqTikOptions,
    #[serde(default)]
    pub gd: GdConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_stage: Option<TwoStageSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default = "default_thetas")]
    pub thetas: Vec<f64>,
    /// PNG display window in cm⁻¹.
    #[serde(default = "default_window")]
    pub window: [f64; 2],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_method() -> Method {
    Method::Dtv
}

impl Default for GdConfig {
    fn default() -> Self {
        Self { step: None, cutoff: default_cutoff() }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_json(&text, path)
    }

    /// The scan geometry, from `geometry` or fitted to `grid` from `scan`.
    pub fn scan_geometry(&self) -> Result<ScanGeometry, ConfigError> {
        let g = match (&self.geometry, &self.scan) {
            (Some(g), None) => g.clone(),
            (None, Some(s)) => ScanGeometry::fitted(&self.grid, s.n_views, s.arc_half_angle, s.n_bins)
                .map_err(|e| ConfigError::Invalid(format!("scan: {e}")))?,
            _ => return Err(ConfigError::Invalid("give exactly one of `geometry` and `scan`".into())),
        };
        g.validate().map_err(|e| ConfigError::Invalid(format!("geometry: {e}")))?;
        Ok(g)
    }

    /// Checks every cross-field constraint that does not need the data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if self.data.is_none() {
            self.scan_geometry()?;
        }
        if let Some(p) = &self.phantom {
            let spec = p.resolve()?;
            if spec.is_3d() == Some(true) && !self.grid.is_3d() {
                return inv("phantom: 3D phantom on a 2D grid".into());
            }
        }
        if self.data.is_some() && (self.noise.is_some() || self.geometry.is_some() || self.scan.is_some()) {
            return inv("`data` brings its own geometry; drop `geometry`, `scan` and `noise`".into());
        }
        if let Some(n) = &self.noise {
            if !(n.fluence > 0.0 && n.fluence.is_finite()) {
                return inv(format!("noise.fluence must be positive, got {}", n.fluence));
            }
        }
        if let Some(d) = &self.dtv {
            d.validate(self.grid.is_3d()).map_err(|e| ConfigError::Invalid(format!("dtv: {e}")))?;
        }
        self.steps.validate().map_err(|e| ConfigError::Invalid(format!("steps: {e}")))?;
        if self.n_iter == 0 || self.log_every == 0 {
            return inv("n_iter and log_every must be at least 1".into());
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return inv("sweep.values must not be empty".into());
            }
        }
        if let Some(t) = &self.two_stage {
            if t.factors.len() != if self.grid.is_3d() { 3 } else { 2 } || t.factors.contains(&0) {
                return inv("two_stage.factors needs one positive factor per grid axis".into());
            }
        }
        if !(self.window[0] < self.window[1]) {
            return inv(format!("window must be increasing, got {:?}", self.window));
        }
        Ok(())
    }

    pub fn dtv_config(&self) -> Result<&DtvConfig, ConfigError> {
        self.dtv.as_ref().ok_or_else(|| ConfigError::Invalid("this method needs a `dtv` section".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "grid": {"dims": [16, 16], "spacing": [0.25, 0.25]},
        "scan": {"n_views": 5, "arc_half_angle": 25, "n_bins": 32},
        "phantom": {"builtin": "breast2d"}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_json(MINIMAL, Path::new("c.json")).unwrap();
        c.validate().unwrap();
        assert_eq!(c.n_iter, 1000);
        assert_eq!(c.method, Method::Dtv);
        assert_eq!(c.steps, StepConfig::default());
        assert_eq!(c.thetas.len(), 11);
        assert_eq!(c.scan_geometry().unwrap().n_bins, 32);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = MINIMAL.replace("\"n_bins\": 32", "\"n_bins\": \"many\"");
        match RunConfig::from_json(&bad, Path::new("c.json")) {
            Err(ConfigError::Parse { field, .. }) => assert_eq!(field, "scan.n_bins"),
            other => panic!("{other:?}"),
        }
        let unknown = MINIMAL.replace("\"phantom\"", "\"phantom_typo\"");
        assert!(RunConfig::from_json(&unknown, Path::new("c.json")).is_err());
    }

    #[test]
    fn cross_field_checks() {
        let mut c = RunConfig::from_json(MINIMAL, Path::new("c.json")).unwrap();
        c.phantom = Some(PhantomConfig { builtin: Some("nope".into()), shapes: None, bounds: None, supersample: 1 });
        assert!(c.validate().is_err());
        let mut c = RunConfig::from_json(MINIMAL, Path::new("c.json")).unwrap();
        c.steps.rho = 2.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::from_json(MINIMAL, Path::new("c.json")).unwrap();
        c.geometry = Some(c.scan_geometry().unwrap());
        assert!(c.validate().is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_json(MINIMAL, Path::new("c.json")).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text, Path::new("r.json")).unwrap(), c);
    }
}
