//! Scenario and run configuration.
//!
//! All physical and problem constants live in [`ScenarioConfig`]; optimizer
//! hyperparameters in [`GmlConfig`]; experiment axes in [`SweepSpec`]. The
//! structs serialize to and from TOML with exactly these key names, and
//! unknown keys are rejected so a typo cannot silently fall back to a
//! default.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Penalty style for the QoS / power / spacing terms of the meta-loss.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// 0/1 indicator penalties. Piecewise constant, so they carry no
    /// gradient; used for reported loss values and evaluation.
    PaperIndicator,
    /// Normalized hinge `max(0, T - Q)/T` replacing each indicator; the
    /// training default, since learners need a constraint signal.
    SoftHinge,
}

impl std::fmt::Display for PenaltyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PenaltyMode::PaperIndicator => write!(f, "paper_indicator"),
            PenaltyMode::SoftHinge => write!(f, "soft_hinge"),
        }
    }
}

impl std::str::FromStr for PenaltyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_indicator" | "indicator" | "paper" => Ok(PenaltyMode::PaperIndicator),
            "soft_hinge" | "soft" => Ok(PenaltyMode::SoftHinge),
            other => Err(Error::Config(format!("unknown penalty mode `{other}`"))),
        }
    }
}

/// `[r_min, r_max]` annulus (meters) used when explicit positions are not
/// supplied; nodes are placed uniformly in it around the FD BS.
pub type Annulus = [f64; 2];

/// All physical and problem constants of one scenario.
///
/// Antenna region side and minimum spacing `ds` are in carrier wavelengths;
/// node positions are in meters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Transmit movable antennas at the FD BS.
    pub n_t: usize,
    /// Receive movable antennas at the FD BS.
    pub n_rc: usize,
    /// Receive movable antennas at the echo-capture BS R.
    pub n_rs: usize,
    /// Downlink users.
    pub d: usize,
    /// Uplink users.
    pub u: usize,
    /// Clutter scatterers.
    pub c: usize,
    /// Carrier wavelength (m).
    pub lambda: f64,
    /// Side of each square antenna mobility region (wavelengths).
    pub region_side: f64,
    /// Minimum antenna spacing (wavelengths).
    pub ds: f64,
    /// Transmit paths per communication link.
    pub l_t: usize,
    /// Receive paths per communication link.
    pub l_r: usize,
    /// Downlink noise power (W).
    pub sigma_d2: f64,
    /// Uplink noise power (W).
    pub sigma_u2: f64,
    /// Sensing (BS R) noise power (W).
    pub sigma_s2: f64,
    /// FD BS transmit power budget (W).
    pub p_bs: f64,
    /// Per-user uplink power cap (W).
    pub p_u_max: f64,
    /// Downlink rate threshold (bit/s/Hz).
    pub r_th_d: f64,
    /// Uplink rate threshold (bit/s/Hz).
    pub r_th_u: f64,
    /// Echo SINR threshold (log2 domain).
    pub lambda_th_s: f64,
    /// Reference pathloss at 1 m (dB).
    pub g0_db: f64,
    /// Pathloss exponent.
    pub alpha: f64,
    /// Residual self-interference gain (dB); scales the SI path response.
    pub rho_si_db: f64,
    /// Target radar cross-section gain (expected |RCS|^2).
    pub alpha_t: f64,
    /// Clutter radar cross-section gain.
    pub alpha_c: f64,
    /// Regularizer: downlink QoS penalty weight.
    pub zeta_thd: f64,
    /// Regularizer: uplink QoS penalty weight.
    pub zeta_thu: f64,
    /// Regularizer: sensing QoS penalty weight.
    pub zeta_ths: f64,
    /// Regularizer: uplink power penalty weight.
    pub zeta_2: f64,
    /// Regularizer: antenna spacing penalty weight.
    pub zeta_3: f64,
    /// Echo-capture BS R position (m); the FD BS sits at the origin.
    pub bs_r_position: [f64; 2],
    /// Explicit downlink user positions (m); sampled from
    /// `dl_user_annulus` when absent.
    pub dl_user_positions: Option<Vec<[f64; 2]>>,
    /// Explicit uplink user positions (m).
    pub ul_user_positions: Option<Vec<[f64; 2]>>,
    /// Explicit target position (m).
    pub target_position: Option<[f64; 2]>,
    /// Explicit clutter positions (m).
    pub clutter_positions: Option<Vec<[f64; 2]>>,
    pub dl_user_annulus: Annulus,
    pub ul_user_annulus: Annulus,
    pub target_annulus: Annulus,
    pub clutter_annulus: Annulus,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_t: 4,
            n_rc: 4,
            n_rs: 4,
            d: 2,
            u: 2,
            c: 2,
            lambda: 0.01,
            region_side: 2.0,
            ds: 0.5,
            l_t: 4,
            l_r: 4,
            sigma_d2: 1e-11,
            sigma_u2: 1e-11,
            sigma_s2: 1e-9,
            p_bs: 1.0,
            p_u_max: 0.1,
            r_th_d: 0.5,
            r_th_u: 0.5,
            lambda_th_s: 1.0,
            g0_db: -40.0,
            alpha: 2.2,
            rho_si_db: -90.0,
            alpha_t: 1e6,
            alpha_c: 1.0,
            zeta_thd: 5.0,
            zeta_thu: 5.0,
            zeta_ths: 5.0,
            zeta_2: 5.0,
            zeta_3: 5.0,
            bs_r_position: [30.0, 0.0],
            dl_user_positions: None,
            ul_user_positions: None,
            target_position: None,
            clutter_positions: None,
            dl_user_annulus: [20.0, 60.0],
            ul_user_annulus: [20.0, 60.0],
            target_annulus: [10.0, 20.0],
            clutter_annulus: [10.0, 25.0],
        }
    }
}

impl ScenarioConfig {
    /// Pathloss reference gain, linear.
    pub fn g0(&self) -> f64 {
        10f64.powf(self.g0_db / 10.0)
    }

    /// Residual self-interference gain, linear.
    pub fn rho_si(&self) -> f64 {
        10f64.powf(self.rho_si_db / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("ds", self.ds),
            ("region_side", self.region_side),
            ("sigma_d2", self.sigma_d2),
            ("sigma_u2", self.sigma_u2),
            ("sigma_s2", self.sigma_s2),
            ("p_bs", self.p_bs),
            ("p_u_max", self.p_u_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.alpha_t < 0.0 || self.alpha_c < 0.0 {
            return Err(Error::Config("alpha_t and alpha_c must be >= 0".into()));
        }
        let counts = [
            ("n_t", self.n_t),
            ("n_rc", self.n_rc),
            ("n_rs", self.n_rs),
            ("d", self.d),
            ("u", self.u),
            ("l_t", self.l_t),
            ("l_r", self.l_r),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        let max_count = self.n_t.max(self.n_rc).max(self.n_rs);
        let grid_k = (max_count as f64).sqrt().ceil();
        let needed = self.ds * (grid_k - 1.0);
        if self.region_side < needed {
            return Err(Error::Config(format!(
                "region_side = {} wavelengths cannot host {} antennas at spacing ds = {} (needs >= {needed})",
                self.region_side, max_count, self.ds
            )));
        }
        for (name, got, want) in [
            (
                "dl_user_positions",
                self.dl_user_positions.as_ref().map(Vec::len),
                self.d,
            ),
            (
                "ul_user_positions",
                self.ul_user_positions.as_ref().map(Vec::len),
                self.u,
            ),
            (
                "clutter_positions",
                self.clutter_positions.as_ref().map(Vec::len),
                self.c,
            ),
        ] {
            if let Some(got) = got {
                if got != want {
                    return Err(Error::Config(format!(
                        "{name} has {got} entries but the scenario declares {want}"
                    )));
                }
            }
        }
        for (name, [lo, hi]) in [
            ("dl_user_annulus", self.dl_user_annulus),
            ("ul_user_annulus", self.ul_user_annulus),
            ("target_annulus", self.target_annulus),
            ("clutter_annulus", self.clutter_annulus),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Config(format!(
                    "{name} must satisfy 0 < r_min <= r_max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization, hex-encoded. Recorded in
    /// run manifests so results can be traced back to an exact config.
    pub fn content_hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        hex_digest(&h.finalize())
    }
}

/// Hyperparameters of the meta-learning optimizer.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GmlConfig {
    /// Inner iterations per outer iteration.
    pub n_i: usize,
    /// Outer iterations per epoch.
    pub n_o: usize,
    /// Epochs.
    pub n_e: usize,
    /// Adam learning rate for the learner weights.
    pub meta_lr: f64,
    /// Hidden width of every learner network.
    pub hidden: usize,
    /// Multiplier on each emitted update delta.
    pub step_scale: f64,
    pub penalty_mode: PenaltyMode,
    /// Weight initialization scheme id.
    pub init_scheme: String,
    /// Optimizer seed (initial point and learner weights).
    pub seed: u64,
}

impl Default for GmlConfig {
    fn default() -> Self {
        GmlConfig {
            n_i: 10,
            n_o: 5,
            n_e: 500,
            meta_lr: 1e-3,
            hidden: 200,
            step_scale: 1e-2,
            penalty_mode: PenaltyMode::SoftHinge,
            init_scheme: "default".to_string(),
            seed: 0,
        }
    }
}

impl GmlConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n_i", self.n_i), ("n_o", self.n_o), ("n_e", self.n_e)] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        if !(self.meta_lr > 0.0) {
            return Err(Error::Config(format!(
                "meta_lr must be > 0, got {}",
                self.meta_lr
            )));
        }
        if !(self.step_scale > 0.0) {
            return Err(Error::Config("step_scale must be > 0".into()));
        }
        if self.hidden < 1 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if self.init_scheme != "default" {
            return Err(Error::Config(format!(
                "unknown init_scheme `{}`",
                self.init_scheme
            )));
        }
        Ok(())
    }
}

/// Which optimization scheme produces a solution.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Meta-learning optimizer, movable antennas at both base stations.
    Ma,
    /// Classical penalized multi-start solver stand-in.
    Nlp,
    /// Movable antennas only at the FD BS; BS R antennas fixed.
    MaFdOnly,
    /// Fixed-position antennas at both base stations.
    FpaBoth,
}

impl Scheme {
    pub fn id(self) -> &'static str {
        match self {
            Scheme::Ma => "ma",
            Scheme::Nlp => "nlp",
            Scheme::MaFdOnly => "ma_fd_only",
            Scheme::FpaBoth => "fpa_both",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ma" => Ok(Scheme::Ma),
            "nlp" => Ok(Scheme::Nlp),
            "ma_fd_only" => Ok(Scheme::MaFdOnly),
            "fpa_both" => Ok(Scheme::FpaBoth),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

/// The swept parameter of an experiment.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    PBs,
    RhoSi,
    ThresholdGrid,
}

impl SweepParam {
    pub fn id(self) -> &'static str {
        match self {
            SweepParam::PBs => "p_bs",
            SweepParam::RhoSi => "rho_si",
            SweepParam::ThresholdGrid => "threshold_grid",
        }
    }
}

/// One experiment sweep: a parameter axis, the schemes to run, and the
/// Monte Carlo depth per point.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub param: SweepParam,
    /// Values of the swept parameter (for `threshold_grid`: the `r_th_d`
    /// axis).
    pub values: Vec<f64>,
    /// Second axis for `threshold_grid` (`r_th_u` values).
    pub values_u: Vec<f64>,
    pub schemes: Vec<Scheme>,
    /// Channel realizations per sweep point.
    pub realizations: usize,
    pub base_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            param: SweepParam::PBs,
            values: vec![0.2, 0.5, 1.0, 2.0, 4.0],
            values_u: Vec::new(),
            schemes: vec![Scheme::Ma],
            realizations: 150,
            base_seed: 1,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep values must be nonempty".into()));
        }
        if self.param == SweepParam::ThresholdGrid && self.values_u.is_empty() {
            return Err(Error::Config(
                "threshold_grid sweeps need a nonempty values_u axis".into(),
            ));
        }
        if self.realizations < 1 {
            return Err(Error::Config("realizations must be >= 1".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("schemes must be nonempty".into()));
        }
        Ok(())
    }
}

/// Classical-solver options (the `nlp` scheme).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub restarts: usize,
    /// Gradient steps per penalty stage.
    pub steps_per_stage: usize,
    /// Penalty stages; the weight multiplies by `penalty_growth` per stage.
    pub stages: usize,
    pub penalty_weight: f64,
    pub penalty_growth: f64,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            restarts: 20,
            steps_per_stage: 100,
            stages: 5,
            penalty_weight: 1.0,
            penalty_growth: 10.0,
            step_size: 0.05,
            seed: 0,
        }
    }
}

impl SolverSpec {
    pub fn validate(&self) -> Result<()> {
        if self.restarts < 1 {
            return Err(Error::Config("restarts must be >= 1".into()));
        }
        if self.steps_per_stage < 1 || self.stages < 1 {
            return Err(Error::Config(
                "steps_per_stage and stages must be >= 1".into(),
            ));
        }
        if !(self.step_size > 0.0 && self.penalty_weight > 0.0 && self.penalty_growth >= 1.0) {
            return Err(Error::Config("invalid solver step/penalty options".into()));
        }
        Ok(())
    }
}

/// Top-level configuration document: `[scenario]`, `[gml]`, `[sweep]`,
/// `[solver]` tables, each optional and default-filled.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub gml: GmlConfig,
    pub sweep: SweepSpec,
    pub solver: SolverSpec,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.gml.validate()?;
        self.sweep.validate()?;
        self.solver.validate()
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("[scenario]\nn_t = 4\nn_tt = 9\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = RunConfig::from_toml_str("[scenario]\nn_t = 6\n").unwrap();
        assert_eq!(cfg.scenario.n_t, 6);
        assert_eq!(cfg.scenario.n_rc, ScenarioConfig::default().n_rc);
    }

    #[test]
    fn region_feasibility_check() {
        let sc = ScenarioConfig {
            n_t: 16,
            region_side: 1.0, // needs ds*(4-1) = 1.5
            ..ScenarioConfig::default()
        };
        assert!(sc.validate().is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = ScenarioConfig::default();
        let mut b = a.clone();
        assert_eq!(a.content_hash(), a.content_hash());
        b.p_bs = 2.0;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
