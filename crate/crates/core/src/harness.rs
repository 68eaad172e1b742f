//! Scenario configuration and seeded Monte-Carlo experiments.
//!
//! A [`ScenarioConfig`] is a JSON document describing the layout, channel,
//! array, sources and method. [`monte_carlo`] sweeps the SNR grid and runs
//! `trials` independent trials per point. Trial `(i, k)` draws from
//! [`stream_rng`]`(seed, i, k)`, so results do not depend on scheduling or
//! worker count.
//!
//! SNR drives both measurement types. Array noise follows the SNR directly.
//! RSS shadowing uses `sigma = sigma_ref * 10^(-snr / 20)` dB.

use crate::array::{sample_covariance, synthesize_snapshots, ArrayError, ArrayGeometry, SnapshotMatrix, SourceSet};
use crate::channel::{shadowing_sigma_for_snr, stream_rng, ChannelError, ChannelModel, RssMeasurement, SPEED_OF_LIGHT};
use crate::decorrelation::{self, Decorrelation, DecorrelationError};
use crate::doa::{
    esprit_cov, max_angle_error, music, root_music, uca_esprit, uca_root_music, wrap_angle, DoaError, DoaEstimate,
    PrewhitenedVula, Spectrum,
};
use crate::geometry::{distance, AnchorSet, GeometryError, Position2D};
use crate::hybrid::{
    fbss_bearings, hybrid_anchor_fusion, hybrid_single_node, most_consistent_bearing, two_lines, FusionEstimator, HybridError,
    HybridNode,
};
use crate::pme::{build_transform, build_transform_with_order, map_covariance, PmeError, PmeTransform};
use crate::rss::{locate, HuberConfig, RssError, RssEstimator};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

pub const RMSE_HEADER: [&str; 4] = ["snr_db", "rmse", "trials", "failures"];
pub const SPECTRUM_HEADER: [&str; 2] = ["angle_deg", "power_db"];
pub const TRIAL_HEADER: [&str; 5] = ["snr_db", "trial", "estimate", "truth", "error"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every trial failed at {snr_db} dB")]
    AllTrialsFailed { snr_db: f64 },
    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Json(_))
    }
}

/// Failure of a single trial's processing chain.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Rss(#[from] RssError),
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Pme(#[from] PmeError),
    #[error(transparent)]
    Decorrelation(#[from] DecorrelationError),
    #[error(transparent)]
    Doa(#[from] DoaError),
    #[error(transparent)]
    Hybrid(#[from] HybridError),
}

/// Which pipeline a scenario feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Rss,
    Doa,
    Hybrid,
}

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const NAMES: &'static [&'static str] = &[$($text),+];
        }

        impl FromStr for $name {
            type Err = HarnessError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(HarnessError::Config(format!(
                        "unknown {} '{s}', expected one of {:?}", stringify!($name), Self::NAMES
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }
    };
}

keyword_enum!(
    /// Trilateration estimator.
    EstimatorKind { Ls => "ls", Wls => "wls", Huber => "huber" }
);
keyword_enum!(
    /// DOA estimator. `music` works on either geometry.
    DoaKind {
        Music => "music",
        RootMusic => "root-music",
        Esprit => "esprit",
        UcaMusic => "uca-music",
        UcaRootMusic => "uca-root-music",
        UcaEsprit => "uca-esprit",
    }
);
keyword_enum!(
    /// Covariance pre-processing.
    DecorrelateKind { None => "none", Fss => "fss", Fbss => "fbss", Toeplitz => "toeplitz" }
);
keyword_enum!(
    /// Fusion scheme; `rss` is the RSS-only baseline over the same nodes.
    HybridScheme { Single => "single", Fbss => "fbss", Ls => "ls", Wls => "wls", TwoLines => "two-lines", Rss => "rss" }
);

impl From<DecorrelateKind> for Decorrelation {
    fn from(k: DecorrelateKind) -> Self {
        match k {
            DecorrelateKind::None => Decorrelation::None,
            DecorrelateKind::Fss => Decorrelation::Fss,
            DecorrelateKind::Fbss => Decorrelation::Fbss,
            DecorrelateKind::Toeplitz => Decorrelation::Toeplitz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKeyword {
    Random,
}

/// Fixed target or a uniform draw over the region for every trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    Fixed(Position2D),
    Keyword(TargetKeyword),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub d0: f64,
    /// Exponent assumed by the estimators.
    pub eta: f64,
    /// Exponent used to generate measurements; defaults to `eta`.
    pub true_eta: Option<f64>,
    /// Shadowing at 0 dB SNR.
    pub sigma_ref_db: f64,
    pub frequency_hz: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { d0: 1.0, eta: 2.0, true_eta: None, sigma_ref_db: 8.0, frequency_hz: 1e9 }
    }
}

impl ChannelConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency_hz
    }

    /// `(truth, assumed)` models at a given SNR.
    pub fn models(&self, snr_db: f64) -> Result<(ChannelModel, ChannelModel), ChannelError> {
        let sigma = shadowing_sigma_for_snr(snr_db, self.sigma_ref_db);
        let assumed = ChannelModel::at_frequency(self.d0, self.eta, sigma, self.frequency_hz)?;
        let truth = assumed.with_eta(self.true_eta.unwrap_or(self.eta))?;
        Ok((truth, assumed))
    }
}

fn default_spacing() -> f64 {
    0.5
}

fn default_elevation() -> f64 {
    90.0
}

/// Array geometry with sizes in wavelengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ArrayConfig {
    Ula {
        elements: usize,
        #[serde(default = "default_spacing")]
        spacing_wavelengths: f64,
    },
    Uca {
        elements: usize,
        radius_wavelengths: f64,
        #[serde(default = "default_elevation")]
        elevation_deg: f64,
        /// Highest phase mode; defaults to the largest the ring supports.
        #[serde(default)]
        pme_order: Option<usize>,
    },
}

impl ArrayConfig {
    pub fn build(&self, wavelength: f64) -> Result<ArrayGeometry, ArrayError> {
        match *self {
            ArrayConfig::Ula { elements, spacing_wavelengths } => {
                ArrayGeometry::ula(elements, spacing_wavelengths * wavelength, wavelength)
            }
            ArrayConfig::Uca { elements, radius_wavelengths, elevation_deg, .. } => {
                ArrayGeometry::uca(elements, radius_wavelengths * wavelength, elevation_deg.to_radians(), wavelength)
            }
        }
    }

    pub fn transform(&self, g: &ArrayGeometry) -> Result<PmeTransform, PmeError> {
        match *self {
            ArrayConfig::Uca { pme_order: Some(h), .. } => build_transform_with_order(g, h),
            _ => build_transform(g),
        }
    }
}

fn default_snapshots() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcesConfig {
    pub azimuths_deg: Vec<f64>,
    #[serde(default)]
    pub amplitudes: Option<Vec<f64>>,
    #[serde(default)]
    pub phases_deg: Option<Vec<f64>>,
    #[serde(default)]
    pub coherent: bool,
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
}

fn build_sources(
    azimuths_deg: &[f64],
    amplitudes: Option<&Vec<f64>>,
    phases_deg: Option<&Vec<f64>>,
    coherent: bool,
) -> Result<SourceSet, ArrayError> {
    let az: Vec<f64> = azimuths_deg.iter().map(|d| d.to_radians()).collect();
    let amps = amplitudes.cloned().unwrap_or_else(|| vec![1.0; az.len()]);
    let src = SourceSet::new(az, amps, coherent)?;
    match phases_deg {
        Some(p) => src.with_phases(p.iter().map(|d| d.to_radians()).collect()),
        None => Ok(src),
    }
}

impl SourcesConfig {
    pub fn build(&self) -> Result<SourceSet, ArrayError> {
        build_sources(&self.azimuths_deg, self.amplitudes.as_ref(), self.phases_deg.as_ref(), self.coherent)
    }
}

/// Hybrid node placement and the multipath seen by its array. The direct
/// path always arrives from the target bearing; `multipath_deg` adds coherent
/// copies from fixed directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    pub center: Position2D,
    #[serde(default)]
    pub rss_anchors: Vec<Position2D>,
    /// Anchor for the two-lines scheme; defaults to the first RSS anchor.
    #[serde(default)]
    pub two_lines_anchor: Option<Position2D>,
    #[serde(default)]
    pub multipath_deg: Vec<f64>,
    /// Phases of the direct path followed by the multipath copies.
    #[serde(default)]
    pub phases_deg: Option<Vec<f64>>,
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
}

impl HybridConfig {
    fn line_anchor(&self) -> Option<Position2D> {
        self.two_lines_anchor.or_else(|| self.rss_anchors.first().copied())
    }

    fn path_count(&self) -> usize {
        1 + self.multipath_deg.len()
    }
}

fn default_grid_step() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    #[serde(default = "MethodConfig::default_estimator")]
    pub estimator: EstimatorKind,
    #[serde(default = "MethodConfig::default_doa")]
    pub doa: DoaKind,
    #[serde(default = "MethodConfig::default_decorrelate")]
    pub decorrelate: DecorrelateKind,
    #[serde(default = "MethodConfig::default_hybrid")]
    pub hybrid: HybridScheme,
    #[serde(default = "default_grid_step")]
    pub grid_step_deg: f64,
    /// Smoothing subarray length; defaults to `M + 1`.
    #[serde(default)]
    pub subarray_len: Option<usize>,
    /// Smoothing in the IRLS row weights `1 / (|e| + epsilon)`.
    #[serde(default = "MethodConfig::default_epsilon")]
    pub huber_epsilon: f64,
}

impl MethodConfig {
    fn default_estimator() -> EstimatorKind {
        EstimatorKind::Ls
    }
    fn default_doa() -> DoaKind {
        DoaKind::Music
    }
    fn default_decorrelate() -> DecorrelateKind {
        DecorrelateKind::None
    }
    fn default_hybrid() -> HybridScheme {
        HybridScheme::Single
    }
    fn default_epsilon() -> f64 {
        HuberConfig::default().epsilon
    }

    fn grid_step(&self) -> f64 {
        self.grid_step_deg.to_radians()
    }
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Ls,
            doa: DoaKind::Music,
            decorrelate: DecorrelateKind::None,
            hybrid: HybridScheme::Single,
            grid_step_deg: default_grid_step(),
            subarray_len: None,
            huber_epsilon: HuberConfig::default().epsilon,
        }
    }
}

/// One experiment. Sizes are in meters, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub region: [f64; 2],
    pub seed: u64,
    pub trials: usize,
    pub snr_db: Vec<f64>,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub anchors: Vec<Position2D>,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub array: Option<ArrayConfig>,
    #[serde(default)]
    pub sources: Option<SourcesConfig>,
    #[serde(default)]
    pub hybrid: Option<HybridConfig>,
    #[serde(default)]
    pub method: MethodConfig,
}

fn cfg_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn in_region(&self, p: Position2D) -> bool {
        (0.0..=self.region[0]).contains(&p.x) && (0.0..=self.region[1]).contains(&p.y)
    }

    fn array_cfg(&self) -> Result<&ArrayConfig, HarnessError> {
        self.array.as_ref().ok_or_else(|| cfg_err("`array` is required"))
    }

    fn target_spec(&self) -> Result<TargetSpec, HarnessError> {
        self.target.ok_or_else(|| cfg_err("`target` is required"))
    }

    /// Semantic checks beyond what the schema expresses.
    pub fn validate(&self, experiment: Experiment) -> Result<(), HarnessError> {
        if self.trials == 0 {
            return Err(cfg_err("trials must be at least 1"));
        }
        if self.snr_db.is_empty() {
            return Err(cfg_err("snr_db must not be empty"));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(cfg_err("snr_db values must be finite"));
        }
        if !(self.region.iter().all(|r| r.is_finite() && *r > 0.0)) {
            return Err(cfg_err("region sides must be positive"));
        }
        let step = self.method.grid_step_deg;
        if !(step > 0.0 && step <= 10.0) {
            return Err(cfg_err(format!("grid_step_deg {step} must lie in (0, 10]")));
        }
        let eps = self.method.huber_epsilon;
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(cfg_err(format!("huber_epsilon {eps} must be positive")));
        }
        self.channel.models(0.0).map_err(|e| cfg_err(e.to_string()))?;
        if let Some(TargetSpec::Fixed(p)) = self.target {
            if !self.in_region(p) {
                return Err(cfg_err(format!("target ({}, {}) lies outside the region", p.x, p.y)));
            }
        }
        match experiment {
            Experiment::Rss => self.validate_rss(),
            Experiment::Doa => self.validate_doa(),
            Experiment::Hybrid => self.validate_hybrid(),
        }
    }

    fn validate_rss(&self) -> Result<(), HarnessError> {
        self.target_spec()?;
        if self.anchors.len() < 3 {
            return Err(cfg_err("at least 3 anchors are required"));
        }
        AnchorSet::new(self.anchors.clone()).map_err(|e| cfg_err(e.to_string()))?;
        Ok(())
    }

    fn validate_doa(&self) -> Result<(), HarnessError> {
        let array = self.array_cfg()?;
        let g = array.build(self.channel.wavelength()).map_err(|e| cfg_err(e.to_string()))?;
        let sources = self.sources.as_ref().ok_or_else(|| cfg_err("`sources` is required"))?;
        let src = sources.build().map_err(|e| cfg_err(e.to_string()))?;
        if sources.snapshots == 0 {
            return Err(cfg_err("snapshots must be at least 1"));
        }
        if src.len() >= g.elements() {
            return Err(cfg_err("there must be fewer sources than elements"));
        }
        let m = &self.method;
        let ula_only = matches!(m.doa, DoaKind::RootMusic | DoaKind::Esprit);
        let uca_only = matches!(m.doa, DoaKind::UcaMusic | DoaKind::UcaRootMusic | DoaKind::UcaEsprit);
        if ula_only && !g.is_ula() {
            return Err(cfg_err(format!("{} needs a ULA", m.doa)));
        }
        if uca_only && !g.is_uca() {
            return Err(cfg_err(format!("{} needs a UCA", m.doa)));
        }
        if g.is_uca() {
            array.transform(&g).map_err(|e| cfg_err(e.to_string()))?;
            match (m.decorrelate, m.doa) {
                (DecorrelateKind::None, _) | (DecorrelateKind::Fbss, DoaKind::Music) => {}
                _ => return Err(cfg_err("a UCA supports decorrelation only as fbss with music")),
            }
        }
        if !matches!(m.decorrelate, DecorrelateKind::None | DecorrelateKind::Toeplitz) {
            let len = if g.is_uca() { array.transform(&g).map_err(|e| cfg_err(e.to_string()))?.len() } else { g.elements() };
            let p = m.subarray_len.unwrap_or(src.len() + 1);
            let plan = decorrelation::SmoothingPlan::new(len, p, src.len()).map_err(|e| cfg_err(e.to_string()))?;
            let check = if m.decorrelate == DecorrelateKind::Fss {
                plan.validate_forward()
            } else {
                plan.validate_forward_backward()
            };
            check.map_err(|e| cfg_err(e.to_string()))?;
        }
        Ok(())
    }

    fn validate_hybrid(&self) -> Result<(), HarnessError> {
        self.target_spec()?;
        let h = self.hybrid.as_ref().ok_or_else(|| cfg_err("`hybrid` is required"))?;
        let array = self.array_cfg()?;
        let g = array.build(self.channel.wavelength()).map_err(|e| cfg_err(e.to_string()))?;
        if !g.is_uca() {
            return Err(cfg_err("the hybrid node needs a UCA"));
        }
        if !self.in_region(h.center) {
            return Err(cfg_err("hybrid center lies outside the region"));
        }
        if h.snapshots == 0 {
            return Err(cfg_err("snapshots must be at least 1"));
        }
        if h.path_count() >= g.elements() {
            return Err(cfg_err("there must be fewer paths than elements"));
        }
        if let Some(p) = &h.phases_deg {
            if p.len() != h.path_count() {
                return Err(cfg_err("phases_deg needs one entry per path, direct path first"));
            }
        }
        let scheme = self.method.hybrid;
        let needs_anchors = matches!(scheme, HybridScheme::Ls | HybridScheme::Wls | HybridScheme::Rss);
        if needs_anchors && h.rss_anchors.len() < 2 {
            return Err(cfg_err(format!("scheme {scheme} needs at least 2 RSS anchors")));
        }
        if !h.rss_anchors.is_empty() {
            AnchorSet::new(h.rss_anchors.clone())
                .and_then(|a| a.with_anchor(h.center))
                .map_err(|e| cfg_err(e.to_string()))?;
        }
        if scheme == HybridScheme::TwoLines && h.line_anchor().is_none() {
            return Err(cfg_err("two-lines needs two_lines_anchor or an RSS anchor"));
        }
        match (scheme, self.method.doa) {
            (HybridScheme::Fbss, _) => {
                let t = array.transform(&g).map_err(|e| cfg_err(e.to_string()))?;
                let p = self.method.subarray_len.unwrap_or(h.path_count() + 1);
                decorrelation::SmoothingPlan::new(t.len(), p, h.path_count())
                    .and_then(|plan| plan.validate_forward_backward())
                    .map_err(|e| cfg_err(e.to_string()))?;
            }
            (_, DoaKind::RootMusic | DoaKind::Esprit) => return Err(cfg_err("the hybrid node needs a UCA estimator")),
            (_, DoaKind::UcaMusic | DoaKind::UcaRootMusic | DoaKind::UcaEsprit) => {
                array.transform(&g).map_err(|e| cfg_err(e.to_string()))?;
            }
            _ => {}
        }
        Ok(())
    }
}

/// Result of one trial. Positions are `[x, y]` in meters; DOA estimates and
/// truths are sorted azimuths in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub estimate: Vec<f64>,
    pub truth: Vec<f64>,
    /// Euclidean error for positions; RMS wrapped angle error for DOA.
    pub error: f64,
}

fn position_outcome(est: Position2D, truth: Position2D) -> TrialOutcome {
    TrialOutcome { estimate: vec![est.x, est.y], truth: vec![truth.x, truth.y], error: distance(est, truth) }
}

fn angle_outcome(est: &[f64], truth: &[f64]) -> TrialOutcome {
    let err = (est.iter().zip(truth).map(|(a, b)| wrap_angle(a - b).powi(2)).sum::<f64>() / truth.len() as f64).sqrt();
    TrialOutcome {
        estimate: est.iter().map(|a| a.to_degrees()).collect(),
        truth: truth.iter().map(|a| a.to_degrees()).collect(),
        error: err.to_degrees(),
    }
}

fn draw_target<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Position2D, HarnessError> {
    Ok(match cfg.target_spec()? {
        TargetSpec::Fixed(p) => p,
        TargetSpec::Keyword(TargetKeyword::Random) => {
            Position2D::new(rng.gen_range(0.0..=cfg.region[0]), rng.gen_range(0.0..=cfg.region[1]))
        }
    })
}

/// Runs trial `trial_index` at SNR grid point `snr_index`. Deterministic in
/// `(cfg.seed, snr_index, trial_index)`.
pub fn run_trial(
    cfg: &ScenarioConfig,
    experiment: Experiment,
    snr_index: usize,
    trial_index: usize,
) -> Result<TrialOutcome, HarnessError> {
    let snr = *cfg.snr_db.get(snr_index).ok_or_else(|| cfg_err(format!("no SNR point {snr_index}")))?;
    let mut rng = stream_rng(cfg.seed, snr_index as u64, trial_index as u64);
    match experiment {
        Experiment::Rss => rss_trial(cfg, snr, &mut rng),
        Experiment::Doa => doa_trial(cfg, snr, &mut rng),
        Experiment::Hybrid => hybrid_trial(cfg, snr, &mut rng),
    }
}

fn rss_estimator(method: &MethodConfig) -> RssEstimator {
    match method.estimator {
        EstimatorKind::Ls => RssEstimator::Ls,
        EstimatorKind::Wls => RssEstimator::Wls,
        EstimatorKind::Huber => RssEstimator::Huber(HuberConfig { epsilon: method.huber_epsilon, ..HuberConfig::default() }),
    }
}

fn rss_trial<R: Rng + ?Sized>(cfg: &ScenarioConfig, snr: f64, rng: &mut R) -> Result<TrialOutcome, HarnessError> {
    let target = draw_target(cfg, rng)?;
    let (truth, assumed) = cfg.channel.models(snr).map_err(PipelineError::from)?;
    let anchors = AnchorSet::new(cfg.anchors.clone()).map_err(PipelineError::from)?;
    let est: Vec<f64> = anchors
        .distances_to(target)
        .into_iter()
        .map(|d| RssMeasurement::observe(d, &truth, &assumed, rng).map(|m| m.est_distance))
        .collect::<Result<_, _>>()
        .map_err(PipelineError::from)?;
    let report = locate(&anchors, &est, &assumed, rss_estimator(&cfg.method)).map_err(PipelineError::from)?;
    Ok(position_outcome(report.position, target))
}

fn ula_subarray(g: &ArrayGeometry, len: usize) -> Result<ArrayGeometry, ArrayError> {
    ArrayGeometry::ula(len, g.spacing().unwrap_or(0.0), g.wavelength())
}

/// Runs the configured estimator on one snapshot block. Returns the estimate
/// and, for MUSIC, its spectrum.
fn estimate_doa(
    cfg: &ScenarioConfig,
    g: &ArrayGeometry,
    pme: Option<&PmeTransform>,
    x: &SnapshotMatrix,
    m: usize,
) -> Result<(Vec<f64>, Option<Spectrum>), PipelineError> {
    let method = &cfg.method;
    let step = method.grid_step();
    let r = sample_covariance(x);
    if g.is_uca() {
        let pme = || pme.ok_or(PmeError::Array(ArrayError::WrongGeometry { expected: "UCA" }));
        return Ok(match method.doa {
            DoaKind::Music if method.decorrelate == DecorrelateKind::Fbss => {
                (fbss_bearings(x, pme()?, m, method.subarray_len)?, None)
            }
            DoaKind::Music => split(music(&r, g, m, step)?),
            DoaKind::UcaMusic => {
                let rv = map_covariance(&r, pme()?, true)?;
                split(music(&rv, &PrewhitenedVula(pme()?), m, step)?)
            }
            DoaKind::UcaRootMusic => (uca_root_music(x, pme()?, m)?.azimuths, None),
            DoaKind::UcaEsprit => (uca_esprit(x, pme()?, m)?.azimuths, None),
            DoaKind::RootMusic | DoaKind::Esprit => return Err(DoaError::WrongGeometry { expected: "ULA" }.into()),
        });
    }
    let rd = decorrelation::apply(&r, method.decorrelate.into(), m, method.subarray_len)?;
    let sub = ula_subarray(g, rd.dim())?;
    Ok(match method.doa {
        DoaKind::Music => split(music(&rd, &sub, m, step)?),
        DoaKind::RootMusic => (root_music(&rd, &sub, m)?.azimuths, None),
        DoaKind::Esprit => (esprit_cov(&rd, &sub, m)?.azimuths, None),
        _ => return Err(DoaError::WrongGeometry { expected: "UCA" }.into()),
    })
}

fn split((spectrum, est): (Spectrum, DoaEstimate)) -> (Vec<f64>, Option<Spectrum>) {
    (est.azimuths, Some(spectrum))
}

fn doa_setup(cfg: &ScenarioConfig) -> Result<(ArrayGeometry, Option<PmeTransform>, SourceSet, usize), HarnessError> {
    let array = cfg.array_cfg()?;
    let g = array.build(cfg.channel.wavelength()).map_err(PipelineError::from)?;
    let pme = if g.is_uca() { Some(array.transform(&g).map_err(PipelineError::from)?) } else { None };
    let sources = cfg.sources.as_ref().ok_or_else(|| cfg_err("`sources` is required"))?;
    let src = sources.build().map_err(PipelineError::from)?;
    Ok((g, pme, src, sources.snapshots))
}

fn doa_trial<R: Rng + ?Sized>(cfg: &ScenarioConfig, snr: f64, rng: &mut R) -> Result<TrialOutcome, HarnessError> {
    let (g, pme, src, k) = doa_setup(cfg)?;
    let x = synthesize_snapshots(&g, &src, k, snr, rng).map_err(PipelineError::from)?;
    let (est, _) = estimate_doa(cfg, &g, pme.as_ref(), &x, src.len())?;
    let mut truth = src.azimuths().to_vec();
    truth.sort_by(f64::total_cmp);
    Ok(angle_outcome(&est, &truth))
}

fn hybrid_trial<R: Rng + ?Sized>(cfg: &ScenarioConfig, snr: f64, rng: &mut R) -> Result<TrialOutcome, HarnessError> {
    let h = cfg.hybrid.as_ref().ok_or_else(|| cfg_err("`hybrid` is required"))?;
    let array = cfg.array_cfg()?;
    let g = array.build(cfg.channel.wavelength()).map_err(PipelineError::from)?;
    let node = HybridNode::new(h.center, g.clone()).map_err(PipelineError::from)?;
    let (truth_model, assumed) = cfg.channel.models(snr).map_err(PipelineError::from)?;

    // Draw order is fixed so every scheme sees the same measurements.
    let target = draw_target(cfg, rng)?;
    let mut observe = |p: Position2D| -> Result<RssMeasurement, PipelineError> {
        Ok(RssMeasurement::observe(distance(p, target), &truth_model, &assumed, rng)?)
    };
    let element_rss: Vec<RssMeasurement> =
        node.element_positions().iter().map(|&e| observe(e)).collect::<Result<_, _>>()?;
    let anchor_d: Vec<f64> =
        h.rss_anchors.iter().map(|&a| observe(a).map(|m| m.est_distance)).collect::<Result<_, _>>()?;
    let line_d = match h.two_lines_anchor {
        Some(a) => Some(observe(a)?.est_distance),
        None => anchor_d.first().copied(),
    };
    let bearing = h.center.bearing_to(target);
    let mut paths = vec![bearing.to_degrees()];
    paths.extend(&h.multipath_deg);
    let coherent = !h.multipath_deg.is_empty();
    let src = build_sources(&paths, None, h.phases_deg.as_ref(), coherent).map_err(PipelineError::from)?;
    let x = synthesize_snapshots(&g, &src, h.snapshots, snr, rng).map_err(PipelineError::from)?;

    let hyb_d = HybridNode::mean_distance(&element_rss);
    let rss_only = || -> Result<Position2D, PipelineError> {
        let anchors = AnchorSet::new(h.rss_anchors.clone())?.with_anchor(h.center)?;
        let mut d = anchor_d.clone();
        d.push(hyb_d);
        Ok(locate(&anchors, &d, &assumed, RssEstimator::Ls)?.position)
    };
    let scheme = cfg.method.hybrid;
    if scheme == HybridScheme::Rss {
        return Ok(position_outcome(rss_only()?, target));
    }

    let m = src.len();
    let bearings = if scheme == HybridScheme::Fbss {
        let pme = array.transform(&g).map_err(PipelineError::from)?;
        fbss_bearings(&x, &pme, m, cfg.method.subarray_len).map_err(PipelineError::from)?
    } else {
        let pme = if cfg.method.doa == DoaKind::Music {
            None
        } else {
            Some(array.transform(&g).map_err(PipelineError::from)?)
        };
        estimate_doa(cfg, &g, pme.as_ref(), &x, m)?.0
    };
    let doa = most_consistent_bearing(&node, &bearings, &element_rss, &h.rss_anchors, &anchor_d).ok_or(PipelineError::Doa(DoaError::NoPeaksFound { found: 0, requested: m }))?;

    // Falls back to the mean element range when no element circle meets the ray.
    let center_d = node.center_range(doa, &element_rss).unwrap_or(hyb_d);
    let est = match scheme {
        HybridScheme::Single | HybridScheme::Fbss => hybrid_single_node(&node, doa, &element_rss),
        HybridScheme::Ls | HybridScheme::Wls => {
            let anchors = AnchorSet::new(h.rss_anchors.clone()).map_err(PipelineError::from)?;
            let est = if scheme == HybridScheme::Ls { FusionEstimator::Ls } else { FusionEstimator::Wls };
            hybrid_anchor_fusion(&node, &anchors, &anchor_d, center_d, &assumed, est, doa)
        }
        HybridScheme::TwoLines => {
            let anchor = h.line_anchor().ok_or_else(|| cfg_err("two-lines anchor missing"))?;
            let d1 = line_d.ok_or_else(|| cfg_err("two-lines anchor missing"))?;
            two_lines(h.center, anchor, d1, center_d, doa)
        }
        HybridScheme::Rss => unreachable!("handled above"),
    }
    .map_err(PipelineError::from)?;
    Ok(position_outcome(est, target))
}

/// One trial as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub snr_db: f64,
    pub trial: usize,
    pub outcome: Result<TrialOutcome, String>,
}

/// RMSE over the successful trials of one SNR point.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseRow {
    pub snr_db: f64,
    pub rmse: f64,
    pub trials: usize,
    pub failures: usize,
    pub mean_runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub rows: Vec<RmseRow>,
    pub records: Vec<TrialRecord>,
}

impl MonteCarloResult {
    pub fn rmse(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.rmse).collect()
    }
}

/// `sqrt(mean(e^2))`.
pub fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Sweeps the SNR grid. `workers = None` uses the global rayon pool; any
/// worker count gives identical results.
pub fn monte_carlo(
    cfg: &ScenarioConfig,
    experiment: Experiment,
    workers: Option<usize>,
) -> Result<MonteCarloResult, HarnessError> {
    cfg.validate(experiment)?;
    let cells: Vec<(usize, usize)> =
        (0..cfg.snr_db.len()).flat_map(|i| (0..cfg.trials).map(move |k| (i, k))).collect();
    let run = || -> Vec<(Result<TrialOutcome, String>, f64)> {
        cells
            .par_iter()
            .map(|&(i, k)| {
                let start = Instant::now();
                let out = run_trial(cfg, experiment, i, k).map_err(|e| e.to_string());
                (out, start.elapsed().as_secs_f64() * 1e3)
            })
            .collect()
    };
    let results = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(run),
        None => run(),
    };

    let mut rows = Vec::with_capacity(cfg.snr_db.len());
    let mut records = Vec::with_capacity(cells.len());
    for (i, &snr_db) in cfg.snr_db.iter().enumerate() {
        let chunk = &results[i * cfg.trials..(i + 1) * cfg.trials];
        let errors: Vec<f64> = chunk.iter().filter_map(|(r, _)| r.as_ref().ok().map(|o| o.error)).collect();
        if errors.is_empty() {
            return Err(HarnessError::AllTrialsFailed { snr_db });
        }
        let failures = cfg.trials - errors.len();
        if failures > 0 {
            log::info!("{failures} of {} trials failed at {snr_db} dB", cfg.trials);
        }
        rows.push(RmseRow {
            snr_db,
            rmse: rmse(&errors),
            trials: cfg.trials,
            failures,
            mean_runtime_ms: chunk.iter().map(|(_, t)| t).sum::<f64>() / cfg.trials as f64,
        });
        records.extend(
            chunk.iter().enumerate().map(|(k, (r, _))| TrialRecord { snr_db, trial: k, outcome: r.clone() }),
        );
    }
    Ok(MonteCarloResult { rows, records })
}

/// Writes the `snr_db,rmse,trials,failures` table.
pub fn write_rmse_csv<W: Write>(rows: &[RmseRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RMSE_HEADER)?;
    for r in rows {
        w.write_record([r.snr_db.to_string(), r.rmse.to_string(), r.trials.to_string(), r.failures.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

/// Per-trial log. Estimate and truth are space-separated; failed trials
/// leave them empty and put the failure in the error column.
pub fn write_trials_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIAL_HEADER)?;
    for r in records {
        let (est, truth, err) = match &r.outcome {
            Ok(o) => (join(&o.estimate), join(&o.truth), o.error.to_string()),
            Err(e) => (String::new(), String::new(), format!("failed: {e}")),
        };
        w.write_record([r.snr_db.to_string(), r.trial.to_string(), est, truth, err])?;
    }
    w.flush()?;
    Ok(())
}

/// MUSIC spectrum of the first trial at the first SNR point.
pub fn spectrum(cfg: &ScenarioConfig) -> Result<Spectrum, HarnessError> {
    cfg.validate(Experiment::Doa)?;
    let m = &cfg.method;
    if !matches!(m.doa, DoaKind::Music | DoaKind::UcaMusic) {
        return Err(cfg_err("spectrum needs a MUSIC-family estimator"));
    }
    let (g, pme, src, k) = doa_setup(cfg)?;
    if g.is_uca() && m.decorrelate != DecorrelateKind::None {
        return Err(cfg_err("spectrum dumps for a UCA do not support decorrelation"));
    }
    let mut rng = stream_rng(cfg.seed, 0, 0);
    let x = synthesize_snapshots(&g, &src, k, cfg.snr_db[0], &mut rng).map_err(PipelineError::from)?;
    let (_, spec) = estimate_doa(cfg, &g, pme.as_ref(), &x, src.len())?;
    spec.ok_or_else(|| cfg_err("estimator produced no spectrum"))
}

pub fn write_spectrum_csv<W: Write>(spec: &Spectrum, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SPECTRUM_HEADER)?;
    for (t, p) in spec.grid.iter().zip(&spec.power_db) {
        w.write_record([t.to_degrees().to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Computes and writes the spectrum CSV to `out`.
pub fn dump_spectrum(cfg: &ScenarioConfig, out: &Path) -> Result<(), HarnessError> {
    let spec = spectrum(cfg)?;
    write_spectrum_csv(&spec, std::io::BufWriter::new(std::fs::File::create(out)?))
}

/// Largest pairwise disagreement of a set of estimates, for agreement checks.
pub fn spread(estimates: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for a in estimates {
        for b in estimates {
            worst = worst.max(max_angle_error(a, b));
        }
    }
    worst
}
