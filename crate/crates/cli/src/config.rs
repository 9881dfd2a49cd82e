//! TOML run configuration.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use emkfs::mmgks::{Lambda, MmgksSettings};
use emkfs::motion::{check_patches, MotionConfig, MotionModel};
use emkfs::phantom::BlocksPhantomConfig;
use emkfs::pipeline::MethodSpec;
use emkfs::prior::PriorConfig;
use emkfs::radon::{default_detector_count, ScanGeometry};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomSection,
    #[serde(default)]
    pub scan: ScanSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub method: MethodSection,
    #[serde(default)]
    pub motion: MotionSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Written by `simulate`; ignored on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ManifestSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub n_x: usize,
    pub n_y: usize,
    /// Index of the last frame.
    pub t: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_speeds")]
    pub speeds: Vec<i64>,
    #[serde(default = "default_intensities")]
    pub intensities: Vec<f64>,
}

fn default_sizes() -> Vec<usize> {
    vec![6, 6, 10, 10]
}
fn default_speeds() -> Vec<i64> {
    vec![2, 2, 1, 1]
}
fn default_intensities() -> Vec<f64> {
    vec![0.9, 0.6, 1.0, 0.7]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    #[serde(default = "default_angles")]
    pub angles: usize,
    /// Per-frame rotation in radians; defaults to `π / (angles · (t + 1))`.
    pub rotation: Option<f64>,
    pub detector_count: Option<usize>,
}

fn default_angles() -> usize {
    5
}

impl Default for ScanSection {
    fn default() -> Self {
        Self {
            angles: default_angles(),
            rotation: None,
            detector_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_noise_seed")]
    pub seed: u64,
}

fn default_sigma() -> f64 {
    0.01
}
fn default_noise_seed() -> u64 {
    1
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            sigma: default_sigma(),
            seed: default_noise_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_ell")]
    pub ell: f64,
    /// Defaults to `min(300, n_x · n_y)`.
    pub r: Option<usize>,
}

fn default_alpha() -> f64 {
    0.28
}
fn default_ell() -> f64 {
    2.0
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            ell: default_ell(),
            r: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    #[serde(default = "default_method")]
    pub name: String,
    #[serde(default = "default_n_iter")]
    pub n_iter: usize,
    #[serde(default = "one")]
    pub q_scale: f64,
    #[serde(default = "one")]
    pub r_scale: f64,
}

fn default_method() -> String {
    "EMIRKFS-M3".into()
}
fn default_n_iter() -> usize {
    2
}
fn one() -> f64 {
    1.0
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            name: default_method(),
            n_iter: default_n_iter(),
            q_scale: 1.0,
            r_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSection {
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    /// `[z_x, z_y]`.
    #[serde(default = "default_patch")]
    pub patch: [usize; 2],
    #[serde(default)]
    pub mmgks: MmgksSection,
}

fn default_zeta() -> f64 {
    5.0
}
fn default_patch() -> [usize; 2] {
    [4, 4]
}

impl Default for MotionSection {
    fn default() -> Self {
        Self {
            zeta: default_zeta(),
            patch: default_patch(),
            mmgks: MmgksSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSetting {
    Value(f64),
    /// Only `"auto"` is accepted.
    Word(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmgksSection {
    #[serde(default = "default_l0")]
    pub l0: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_lambda")]
    pub lambda: LambdaSetting,
    pub eps: Option<f64>,
}

fn default_l0() -> usize {
    5
}
fn default_k_max() -> usize {
    30
}
fn default_tol() -> f64 {
    1e-4
}
fn default_lambda() -> LambdaSetting {
    LambdaSetting::Word("auto".into())
}

impl Default for MmgksSection {
    fn default() -> Self {
        Self {
            l0: default_l0(),
            k_max: default_k_max(),
            tol: default_tol(),
            lambda: default_lambda(),
            eps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSection {
    pub format: u32,
    pub content_hash: String,
    /// Relative path → sha256 of the file contents.
    pub files: BTreeMap<String, String>,
}

fn field_error(field: &str, err: emkfs::Error) -> CliError {
    CliError::Config(format!("{field}: {}", err.root()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.manifest = None;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills every defaulted value so the configuration can be written out
    /// and replayed exactly.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        let ph = &out.phantom;
        let n_s = ph.n_x * ph.n_y;
        let rotation = PI / (out.scan.angles * (ph.t + 1)) as f64;
        out.scan.rotation.get_or_insert(rotation);
        out.scan
            .detector_count
            .get_or_insert(default_detector_count(ph.n_x, ph.n_y));
        out.prior.r.get_or_insert(300.min(n_s));
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let r = self.resolved();
        r.phantom_config()?;
        r.geometry()?;
        if !(r.noise.sigma >= 0.0 && r.noise.sigma.is_finite()) {
            return Err(CliError::Config(format!(
                "noise.sigma: must be finite and ≥ 0, got {}",
                r.noise.sigma
            )));
        }
        r.prior_config()?;
        r.method_spec()?;
        r.motion_config()?;
        Ok(())
    }

    pub fn phantom_config(&self) -> Result<BlocksPhantomConfig, CliError> {
        let p = &self.phantom;
        BlocksPhantomConfig::seeded(p.n_x, p.n_y, p.t, &p.sizes, &p.speeds, &p.intensities, p.seed)
            .map_err(|e| field_error("phantom", e))
    }

    pub fn geometry(&self) -> Result<ScanGeometry, CliError> {
        let r = self.resolved();
        let p = &r.phantom;
        let mut g = ScanGeometry::equispaced(
            p.n_x,
            p.n_y,
            p.t + 1,
            r.scan.angles,
            r.scan.rotation.expect("resolved"),
        )
        .map_err(|e| field_error("scan", e))?;
        g.detector_count = r.scan.detector_count.expect("resolved");
        g.validate().map_err(|e| field_error("scan.detector_count", e))?;
        Ok(g)
    }

    pub fn prior_config(&self) -> Result<PriorConfig, CliError> {
        let r = self.resolved();
        let cfg = PriorConfig {
            alpha: r.prior.alpha,
            ell: r.prior.ell,
            r: r.prior.r.expect("resolved"),
        };
        cfg.validate(r.phantom.n_x * r.phantom.n_y)
            .map_err(|e| field_error("prior", e))?;
        Ok(cfg)
    }

    pub fn method_spec(&self) -> Result<MethodSpec, CliError> {
        let m = &self.method;
        let mut spec: MethodSpec = m.name.parse().map_err(|e| field_error("method.name", e))?;
        spec.n_iter = m.n_iter;
        spec.q_scale = m.q_scale;
        spec.r_scale = m.r_scale;
        spec.validate().map_err(|e| field_error("method", e))?;
        Ok(spec)
    }

    pub fn motion_config(&self) -> Result<MotionConfig, CliError> {
        let m = &self.motion;
        let (n_x, n_y) = (self.phantom.n_x, self.phantom.n_y);
        check_patches(n_x, n_y, m.patch[0], m.patch[1]).map_err(|e| field_error("motion.patch", e))?;
        let lambda = match &m.mmgks.lambda {
            LambdaSetting::Value(v) => Lambda::Fixed(*v),
            LambdaSetting::Word(w) if w == "auto" => Lambda::Auto,
            LambdaSetting::Word(w) => {
                return Err(CliError::Config(format!(
                    "motion.mmgks.lambda: expected a number or \"auto\", got \"{w}\""
                )))
            }
        };
        let cfg = MotionConfig {
            model: self.method_spec()?.motion,
            zeta: m.zeta,
            patch: (m.patch[0], m.patch[1]),
            of: MmgksSettings {
                lambda,
                eps: m.mmgks.eps,
                l0: m.mmgks.l0,
                k_max: m.mmgks.k_max,
                tol: m.mmgks.tol,
            },
        };
        MotionConfig { model: MotionModel::OpticalFlow, ..cfg }
            .validate(n_x, n_y)
            .map_err(|e| field_error("motion", e))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }
}
