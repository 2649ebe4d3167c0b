//! Run configuration: TOML schema, validation, and conversion into the
//! library's domain types. The SHA-256 of the raw config bytes stamps every
//! emitted artifact so results stay traceable to their inputs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use probgain::behavior::{SignalLayout, GAP_TOL};
use probgain::estimator::{NoiseModel, ARE_TOL};
use probgain::numerics::SymMatrix;
use probgain::sdp::FEAS_TOL;
use probgain::simulator::{KernelModel, MeanProgram, NoiseMixtures, OVERFLOW_CAP};
use probgain::synthesis::{corollary1_gammas, DesignMode, GammaChoice};

use crate::error::{internal, parse_err, usage, CliError};

/// Hex prefix length of the config hash used in file headers.
const HASH_PREFIX: usize = 12;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub layout: LayoutCfg,
    pub kernel: Option<KernelCfg>,
    pub noise: NoiseCfg,
    #[serde(default)]
    pub mixtures: MixturesCfg,
    pub data: Option<DataCfg>,
    pub design: DesignCfg,
    #[serde(default)]
    pub disturbance: DisturbanceCfg,
    pub simulate: Option<SimulateCfg>,
    #[serde(default)]
    pub seeds: SeedsCfg,
    #[serde(default)]
    pub tolerances: TolerancesCfg,
}

impl RunConfig {
    /// Reads and validates a config file; returns it with the header hash.
    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let bytes = std::fs::read(path).map_err(|e| parse_err(path, e))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let hash: String = digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
            [..HASH_PREFIX]
            .to_string();
        let text = String::from_utf8(bytes).map_err(|e| parse_err(path, e))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| parse_err(path, e))?;
        config.validate().map_err(|e| match e {
            CliError::Usage(msg) => parse_err(path, msg),
            other => other,
        })?;
        Ok((config, hash))
    }

    fn validate(&self) -> Result<(), CliError> {
        self.design.check_choice()?;
        match self.design.mode {
            ModeCfg::Constant => {
                if self.disturbance.mode != DisturbanceMode::Constant {
                    return Err(usage(
                        "constant-mean design requires [disturbance] mode = \"constant\"",
                    ));
                }
            }
            ModeCfg::Zero => {
                if self.disturbance.mode != DisturbanceMode::Zero {
                    return Err(usage("zero-mean design requires [disturbance] mode = \"zero\""));
                }
            }
            ModeCfg::General => {}
        }
        self.disturbance.check_fields(self.layout.q)?;
        self.tolerances.check()?;
        if let Some(sim) = &self.simulate {
            sim.check()?;
        }
        if let Some(data) = &self.data {
            data.check()?;
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutCfg {
    pub p: usize,
    pub m: usize,
    pub q: usize,
    pub lag: usize,
    pub n_state: Option<usize>,
}

impl LayoutCfg {
    /// Layout with the configured state cardinality; errors when it is left
    /// to be learned but the command needs it up front.
    pub fn fixed(&self) -> Result<SignalLayout, CliError> {
        let n_state = self.n_state.ok_or_else(|| {
            usage("this command needs [layout] n_state; auto selection only applies to design")
        })?;
        self.with_state(n_state)
    }

    pub fn with_state(&self, n_state: usize) -> Result<SignalLayout, CliError> {
        SignalLayout::new(self.p, self.m, self.q, self.lag, n_state).map_err(internal)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelCfg {
    pub r_y: Vec<Vec<Vec<f64>>>,
    pub r_u: Vec<Vec<Vec<f64>>>,
    pub r_d: Vec<Vec<Vec<f64>>>,
}

impl KernelCfg {
    pub fn to_model(&self) -> Result<KernelModel, CliError> {
        let convert = |blocks: &[Vec<Vec<f64>>], name: &str| -> Result<Vec<DMatrix<f64>>, CliError> {
            if blocks.is_empty() {
                return Err(usage(format!("[kernel] {name} needs at least one block")));
            }
            blocks.iter().enumerate().map(|(i, b)| matrix(b, &format!("{name}[{i}]"))).collect()
        };
        let r_y = convert(&self.r_y, "r_y")?;
        let r_u = convert(&self.r_u, "r_u")?;
        let r_d = convert(&self.r_d, "r_d")?;
        KernelModel::new(r_y, r_u, r_d).map_err(internal)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseCfg {
    pub s_d: Vec<Vec<f64>>,
    pub s_u: Vec<Vec<f64>>,
    pub s_n: Vec<Vec<f64>>,
}

impl NoiseCfg {
    pub fn to_model(&self, layout: &SignalLayout) -> Result<NoiseModel, CliError> {
        let s_d = SymMatrix::from_average(&matrix(&self.s_d, "s_d")?);
        let s_u = SymMatrix::from_average(&matrix(&self.s_u, "s_u")?);
        let s_n = SymMatrix::from_average(&matrix(&self.s_n, "s_n")?);
        let model = NoiseModel::new(s_d, s_u, s_n).map_err(internal)?;
        model.validate_layout(layout).map_err(internal)?;
        Ok(model)
    }
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum MixtureKind {
    Gaussian,
    Randomized,
}

#[derive(Debug, Deserialize, Clone, Copy)]
#[serde(deny_unknown_fields)]
pub struct MixturesCfg {
    pub kind: MixtureKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MixturesCfg {
    fn default() -> Self {
        Self { kind: MixtureKind::Gaussian, seed: 0 }
    }
}

impl MixturesCfg {
    pub fn to_mixtures(self, noise: &NoiseModel) -> Result<NoiseMixtures, CliError> {
        match self.kind {
            MixtureKind::Gaussian => NoiseMixtures::gaussian(noise),
            MixtureKind::Randomized => NoiseMixtures::randomized(noise, self.seed),
        }
        .map_err(internal)
    }

    pub fn describe(&self) -> String {
        match self.kind {
            MixtureKind::Gaussian => "gaussian".into(),
            MixtureKind::Randomized => format!("randomized:{}", self.seed),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataCfg {
    pub trajectories: usize,
    pub steps: usize,
    pub excitation_amplitude: Option<f64>,
    #[serde(default = "default_retry_cap")]
    pub retry_cap: usize,
}

fn default_retry_cap() -> usize {
    8
}

impl DataCfg {
    fn check(&self) -> Result<(), CliError> {
        if let Some(a) = self.excitation_amplitude {
            if !(a.is_finite() && a > 0.0) {
                return Err(usage(format!("[data] excitation_amplitude {a} must be positive")));
            }
        }
        if self.retry_cap == 0 {
            return Err(usage("[data] retry_cap must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ModeCfg {
    General,
    Constant,
    Zero,
}

impl ModeCfg {
    pub fn to_mode(self) -> DesignMode {
        match self {
            ModeCfg::General => DesignMode::General,
            ModeCfg::Constant => DesignMode::ConstantMean,
            ModeCfg::Zero => DesignMode::ZeroMean,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corollary1Cfg {
    pub gamma: f64,
    pub p: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignCfg {
    pub mode: ModeCfg,
    pub gamma1_sq: Option<f64>,
    pub gamma2_sq: Option<f64>,
    pub corollary1: Option<Corollary1Cfg>,
    #[serde(default)]
    pub optimize: bool,
}

impl DesignCfg {
    /// Exactly one gain specification must be active, and optimization is a
    /// constant-mean feature.
    fn check_choice(&self) -> Result<(), CliError> {
        let fixed = self.gamma1_sq.is_some() || self.gamma2_sq.is_some();
        let picks = usize::from(fixed) + usize::from(self.corollary1.is_some())
            + usize::from(self.optimize);
        if picks > 1 {
            return Err(usage(
                "[design] accepts one of: gamma1_sq/gamma2_sq, corollary1, optimize",
            ));
        }
        if picks == 0 {
            return Err(usage(
                "[design] needs a gain choice: gamma1_sq/gamma2_sq, corollary1, or optimize",
            ));
        }
        if self.optimize && self.mode != ModeCfg::Constant {
            return Err(usage("[design] optimize requires mode = \"constant\""));
        }
        Ok(())
    }

    /// Resolves the gain choice for a possibly overridden mode.
    pub fn gamma_choice(&self, mode: DesignMode) -> Result<GammaChoice, CliError> {
        if self.optimize {
            if mode != DesignMode::ConstantMean {
                return Err(usage("optimize requires the constant-mean design mode"));
            }
            return Ok(GammaChoice::Minimize);
        }
        if let Some(c) = &self.corollary1 {
            let (g1, g2) = corollary1_gammas(c.gamma, c.p).map_err(internal)?;
            return Ok(GammaChoice::Fixed { gamma1_sq: g1, gamma2_sq: g2 });
        }
        let gamma2_sq = self
            .gamma2_sq
            .ok_or_else(|| usage("[design] gamma2_sq is required for a fixed gain pair"))?;
        let gamma1_sq = match (mode, self.gamma1_sq) {
            (DesignMode::ZeroMean, g1) => g1.unwrap_or(0.0),
            (_, Some(g1)) => g1,
            (_, None) => {
                return Err(usage("[design] gamma1_sq is required outside zero-mean mode"))
            }
        };
        Ok(GammaChoice::Fixed { gamma1_sq, gamma2_sq })
    }
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceMode {
    #[default]
    Zero,
    Constant,
    Program,
    Randomized,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidCfg {
    pub amplitude: Vec<f64>,
    pub period: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepCfg {
    pub at: usize,
    pub offset: Vec<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceCfg {
    #[serde(default)]
    pub mode: DisturbanceMode,
    pub d_bar: Option<Vec<f64>>,
    pub base: Option<Vec<f64>>,
    #[serde(default)]
    pub sinusoids: Vec<SinusoidCfg>,
    #[serde(default)]
    pub steps: Vec<StepCfg>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
}

impl DisturbanceCfg {
    fn check_fields(&self, q: usize) -> Result<(), CliError> {
        match self.mode {
            DisturbanceMode::Zero => Ok(()),
            DisturbanceMode::Constant => {
                let d = self
                    .d_bar
                    .as_ref()
                    .ok_or_else(|| usage("[disturbance] constant mode needs d_bar"))?;
                if d.len() != q {
                    return Err(usage(format!(
                        "[disturbance] d_bar has {} entries, layout q = {q}",
                        d.len()
                    )));
                }
                Ok(())
            }
            DisturbanceMode::Program => Ok(()),
            DisturbanceMode::Randomized => match self.scale {
                Some(s) if s.is_finite() && s > 0.0 => Ok(()),
                _ => Err(usage("[disturbance] randomized mode needs a positive scale")),
            },
        }
    }

    pub fn d_bar(&self, q: usize) -> Result<DVector<f64>, CliError> {
        let d = self
            .d_bar
            .as_ref()
            .ok_or_else(|| usage("constant-mean design needs [disturbance] d_bar"))?;
        if d.len() != q {
            return Err(usage(format!("d_bar has {} entries, layout q = {q}", d.len())));
        }
        Ok(DVector::from_column_slice(d))
    }

    /// Builds the forecast program; `horizon` scales the randomized variant.
    pub fn mean_program(&self, q: usize, horizon: usize) -> Result<MeanProgram, CliError> {
        match self.mode {
            DisturbanceMode::Zero => Ok(MeanProgram::zero(q)),
            DisturbanceMode::Constant => Ok(MeanProgram::constant(self.d_bar(q)?)),
            DisturbanceMode::Randomized => Ok(MeanProgram::randomized(
                q,
                self.scale.unwrap_or(1.0),
                horizon,
                self.seed.unwrap_or(0),
            )),
            DisturbanceMode::Program => {
                let base = match &self.base {
                    Some(b) if b.len() == q => DVector::from_column_slice(b),
                    Some(b) => {
                        return Err(usage(format!(
                            "[disturbance] base has {} entries, layout q = {q}",
                            b.len()
                        )))
                    }
                    None => DVector::zeros(q),
                };
                let mut program = MeanProgram::constant(base);
                for s in &self.sinusoids {
                    program = program
                        .with_sinusoid(
                            DVector::from_column_slice(&s.amplitude),
                            s.period,
                            s.phase,
                        )
                        .map_err(internal)?;
                }
                for s in &self.steps {
                    program = program
                        .with_step(s.at, DVector::from_column_slice(&s.offset))
                        .map_err(internal)?;
                }
                Ok(program)
            }
        }
    }

    pub fn describe(&self) -> String {
        match self.mode {
            DisturbanceMode::Zero => "zero".into(),
            DisturbanceMode::Constant => "constant".into(),
            DisturbanceMode::Program => "program".into(),
            DisturbanceMode::Randomized => {
                format!("randomized:{}", self.seed.unwrap_or(0))
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateCfg {
    pub horizon: usize,
    pub cohort: usize,
    #[serde(default = "default_overflow")]
    pub overflow_cap: f64,
    #[serde(default = "default_grid_min")]
    pub grid_min: f64,
    #[serde(default = "default_grid_max")]
    pub grid_max: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub divergence_threshold: f64,
    #[serde(default)]
    pub outer_groups: usize,
    #[serde(default)]
    pub traj_panels: usize,
    #[serde(default)]
    pub record_dumps: usize,
}

fn default_overflow() -> f64 {
    OVERFLOW_CAP
}
fn default_grid_min() -> f64 {
    1.0
}
fn default_grid_max() -> f64 {
    10.0
}
fn default_grid_points() -> usize {
    51
}

impl SimulateCfg {
    fn check(&self) -> Result<(), CliError> {
        if self.grid_points < 2 {
            return Err(usage("[simulate] grid needs at least two points"));
        }
        if !(self.grid_min.is_finite() && self.grid_min > 0.0 && self.grid_max > self.grid_min) {
            return Err(usage("[simulate] grid requires 0 < grid_min < grid_max"));
        }
        if !(0.0..=1.0).contains(&self.divergence_threshold) {
            return Err(usage("[simulate] divergence_threshold must lie in [0, 1]"));
        }
        if self.outer_groups == 1 {
            return Err(usage("[simulate] outer_groups must be 0 (skip) or at least 2"));
        }
        if !(self.overflow_cap.is_finite() && self.overflow_cap > 0.0) {
            return Err(usage("[simulate] overflow_cap must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let n = self.grid_points;
        (0..n)
            .map(|i| {
                self.grid_min + (self.grid_max - self.grid_min) * i as f64 / (n - 1) as f64
            })
            .collect()
    }
}

#[derive(Debug, Deserialize, Clone, Copy)]
#[serde(deny_unknown_fields)]
pub struct SeedsCfg {
    #[serde(default = "default_seed")]
    pub data: u64,
    #[serde(default = "default_seed")]
    pub simulate: u64,
}

fn default_seed() -> u64 {
    1
}

impl Default for SeedsCfg {
    fn default() -> Self {
        Self { data: 1, simulate: 1 }
    }
}

#[derive(Debug, Deserialize, Clone, Copy)]
#[serde(deny_unknown_fields)]
pub struct TolerancesCfg {
    #[serde(default = "default_are_tol")]
    pub are_tol: f64,
    #[serde(default = "default_feas_tol")]
    pub feas_tol: f64,
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
}

fn default_are_tol() -> f64 {
    ARE_TOL
}
fn default_feas_tol() -> f64 {
    FEAS_TOL
}
fn default_gap_tol() -> f64 {
    GAP_TOL
}

impl Default for TolerancesCfg {
    fn default() -> Self {
        Self { are_tol: ARE_TOL, feas_tol: FEAS_TOL, gap_tol: GAP_TOL }
    }
}

impl TolerancesCfg {
    fn check(&self) -> Result<(), CliError> {
        for (name, v) in
            [("are_tol", self.are_tol), ("feas_tol", self.feas_tol), ("gap_tol", self.gap_tol)]
        {
            if !(v.is_finite() && v > 0.0) {
                return Err(usage(format!("[tolerances] {name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Rectangular nested-array to matrix conversion with shape reporting.
pub fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(usage(format!("{name} must be a non-empty matrix")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(usage(format!("{name} has ragged rows")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied()))
}
