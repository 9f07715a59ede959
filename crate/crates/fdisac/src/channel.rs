//! Field-response channel model.
//!
//! Every link is a product of path response gains and per-antenna phase
//! signatures. A path's phase at an antenna depends only on the antenna's
//! local 2-D position and the path's elevation/azimuth angles, so moving an
//! antenna changes phases but not gains; that is what makes the channels
//! differentiable functions of the layout.
//!
//! Geometry (angles, path response matrices, fading coefficients) is frozen
//! per realization by [`sample_paths`]; [`rebuild_channels`] then assembles
//! every channel on the differentiation tape from the current antenna
//! layout.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::config::ScenarioConfig;
use crate::diffcore::{cmatmul, chermitian, CMatVar, CVar, Graph, Var};
use crate::error::{Error, Result};

/// Phase sign convention of a field response vector. Transmit-side vectors
/// and the sensing steering vectors use the negative exponent; the
/// self-interference link is written with the positive exponent.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FrvSign {
    Negative,
    Positive,
}

impl FrvSign {
    fn factor(self) -> f64 {
        match self {
            FrvSign::Negative => -1.0,
            FrvSign::Positive => 1.0,
        }
    }
}

/// Antenna group identifiers: FD BS transmit, FD BS receive, BS R receive.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AntennaGroup {
    Tx,
    RxC,
    RxS,
}

pub const ANTENNA_GROUPS: [AntennaGroup; 3] = [AntennaGroup::Tx, AntennaGroup::RxC, AntennaGroup::RxS];

impl AntennaGroup {
    pub fn name(self) -> &'static str {
        match self {
            AntennaGroup::Tx => "t_bs",
            AntennaGroup::RxC => "r_bs_c",
            AntennaGroup::RxS => "r_bs_s",
        }
    }
}

/// The optimizable 2-D antenna positions, in wavelength-relative local
/// coordinates within each group's square mobility region.
///
/// Feasibility (region bounds, pairwise spacing) is a property checked by
/// `constraints`, not an invariant of the struct: intermediate optimizer
/// states may violate it.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AntennaLayout {
    pub t_bs: Vec<[f64; 2]>,
    pub r_bs_c: Vec<[f64; 2]>,
    pub r_bs_s: Vec<[f64; 2]>,
}

impl AntennaLayout {
    /// The fixed-position reference layout: a centered square grid with
    /// half-wavelength pitch (or `ds`, if larger) in each region.
    pub fn fpa_grid(cfg: &ScenarioConfig) -> Result<Self> {
        Ok(AntennaLayout {
            t_bs: grid_positions(cfg.n_t, cfg.region_side, cfg.ds)?,
            r_bs_c: grid_positions(cfg.n_rc, cfg.region_side, cfg.ds)?,
            r_bs_s: grid_positions(cfg.n_rs, cfg.region_side, cfg.ds)?,
        })
    }

    pub fn group(&self, g: AntennaGroup) -> &[[f64; 2]] {
        match g {
            AntennaGroup::Tx => &self.t_bs,
            AntennaGroup::RxC => &self.r_bs_c,
            AntennaGroup::RxS => &self.r_bs_s,
        }
    }

    pub fn group_mut(&mut self, g: AntennaGroup) -> &mut Vec<[f64; 2]> {
        match g {
            AntennaGroup::Tx => &mut self.t_bs,
            AntennaGroup::RxC => &mut self.r_bs_c,
            AntennaGroup::RxS => &mut self.r_bs_s,
        }
    }

    /// Flatten to `x,y` pairs in group order `t_bs, r_bs_c, r_bs_s`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * (self.t_bs.len() + self.r_bs_c.len() + self.r_bs_s.len()));
        for grp in [&self.t_bs, &self.r_bs_c, &self.r_bs_s] {
            for p in grp {
                out.push(p[0]);
                out.push(p[1]);
            }
        }
        out
    }

    pub fn from_flat(n_t: usize, n_rc: usize, n_rs: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != 2 * (n_t + n_rc + n_rs) {
            return Err(Error::Shape(format!(
                "layout vector has {} coordinates, expected {}",
                flat.len(),
                2 * (n_t + n_rc + n_rs)
            )));
        }
        let take = |range: std::ops::Range<usize>| {
            flat[range]
                .chunks_exact(2)
                .map(|p| [p[0], p[1]])
                .collect::<Vec<_>>()
        };
        Ok(AntennaLayout {
            t_bs: take(0..2 * n_t),
            r_bs_c: take(2 * n_t..2 * (n_t + n_rc)),
            r_bs_s: take(2 * (n_t + n_rc)..2 * (n_t + n_rc + n_rs)),
        })
    }
}

fn grid_positions(count: usize, region_side: f64, ds: f64) -> Result<Vec<[f64; 2]>> {
    let pitch = ds.max(0.5);
    let k = (count as f64).sqrt().ceil() as usize;
    let extent = pitch * (k.saturating_sub(1)) as f64;
    if extent > region_side {
        return Err(Error::InfeasibleLayout(format!(
            "{count} antennas at pitch {pitch} wavelengths need {extent}, region side is {region_side}"
        )));
    }
    let origin = (region_side - extent) / 2.0;
    let mut out = Vec::with_capacity(count);
    'outer: for r in 0..k {
        for c in 0..k {
            if out.len() == count {
                break 'outer;
            }
            out.push([origin + c as f64 * pitch, origin + r as f64 * pitch]);
        }
    }
    Ok(out)
}

/// Per-link multipath geometry: departure/arrival angles and the path
/// response matrix coupling them. Fixed per realization; independent of the
/// antenna positions.
#[derive(Clone, Debug)]
pub struct PathSet {
    /// `(theta, phi)` per transmit path.
    pub departure: Vec<[f64; 2]>,
    /// `(theta, phi)` per receive path.
    pub arrival: Vec<[f64; 2]>,
    /// Path response matrix, `arrival.len() x departure.len()`, row-major.
    pub prm: Vec<Complex64>,
}

impl PathSet {
    pub fn l_t(&self) -> usize {
        self.departure.len()
    }

    pub fn l_r(&self) -> usize {
        self.arrival.len()
    }
}

/// One sensing hop pair: BS -> scatterer departure angles, scatterer -> BS R
/// arrival angles, and the complex fading coefficient of each hop.
#[derive(Clone, Debug)]
pub struct SensingPath {
    pub departure: [f64; 2],
    pub arrival: [f64; 2],
    pub beta_b: Complex64,
    pub beta_sr: Complex64,
}

/// A full sampled channel realization: node geometry plus the path sets of
/// every link in the system.
#[derive(Clone, Debug)]
pub struct Realization {
    pub seed: u64,
    pub dl_user_positions: Vec<[f64; 2]>,
    pub ul_user_positions: Vec<[f64; 2]>,
    pub target_position: [f64; 2],
    pub clutter_positions: Vec<[f64; 2]>,
    pub bs_r_position: [f64; 2],
    /// BS -> DL user i.
    pub dl: Vec<PathSet>,
    /// UL user j -> BS.
    pub ul: Vec<PathSet>,
    /// UL user j -> DL user i, indexed `[j][i]`.
    pub ui: Vec<Vec<PathSet>>,
    /// BS transmit side -> BS receive side (residual self-interference).
    pub si: PathSet,
    /// UL user j -> BS R.
    pub jr: Vec<PathSet>,
    pub target: SensingPath,
    pub clutter: Vec<SensingPath>,
}

fn draw_cn(rng: &mut ChaCha12Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

fn draw_angles(rng: &mut ChaCha12Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let phi = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
            [theta, phi]
        })
        .collect()
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn annulus_point(rng: &mut ChaCha12Rng, annulus: [f64; 2]) -> [f64; 2] {
    let r2 = rng.gen_range(annulus[0] * annulus[0]..=annulus[1] * annulus[1]);
    let r = r2.sqrt();
    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
    [r * ang.cos(), r * ang.sin()]
}

/// Per-entry path response variance of a link of length `d` meters spread
/// over `l_t` transmit paths.
fn prm_variance(cfg: &ScenarioConfig, d: f64) -> f64 {
    cfg.g0() * d.max(1.0).powf(-cfg.alpha) / cfg.l_t as f64
}

fn draw_path_set(rng: &mut ChaCha12Rng, cfg: &ScenarioConfig, d: f64) -> PathSet {
    let variance = prm_variance(cfg, d);
    draw_path_set_with_variance(rng, cfg, variance)
}

fn draw_path_set_with_variance(
    rng: &mut ChaCha12Rng,
    cfg: &ScenarioConfig,
    variance: f64,
) -> PathSet {
    let departure = draw_angles(rng, cfg.l_t);
    let arrival = draw_angles(rng, cfg.l_r);
    let prm = (0..cfg.l_r * cfg.l_t)
        .map(|_| draw_cn(rng, variance))
        .collect();
    PathSet {
        departure,
        arrival,
        prm,
    }
}

/// Sample the complete channel geometry for one realization.
/// Deterministic in `(config, seed)`: angles are i.i.d. uniform (elevation
/// over `[0, pi]`, azimuth over `[-pi/2, pi/2]`), path response entries are
/// circularly-symmetric Gaussian with per-entry variance
/// `g0 * d^-alpha / l_t`, the self-interference response is scaled by
/// `rho_si` instead of a pathloss, and sensing hop fades carry the pathloss
/// of their hop.
pub fn sample_paths(cfg: &ScenarioConfig, seed: u64) -> Result<Realization> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let bs = [0.0, 0.0];

    let dl_user_positions = match &cfg.dl_user_positions {
        Some(p) => p.clone(),
        None => (0..cfg.d).map(|_| annulus_point(&mut rng, cfg.dl_user_annulus)).collect(),
    };
    let ul_user_positions = match &cfg.ul_user_positions {
        Some(p) => p.clone(),
        None => (0..cfg.u).map(|_| annulus_point(&mut rng, cfg.ul_user_annulus)).collect(),
    };
    let target_position = match cfg.target_position {
        Some(p) => p,
        None => annulus_point(&mut rng, cfg.target_annulus),
    };
    let clutter_positions = match &cfg.clutter_positions {
        Some(p) => p.clone(),
        None => (0..cfg.c).map(|_| annulus_point(&mut rng, cfg.clutter_annulus)).collect(),
    };
    let bs_r = cfg.bs_r_position;

    let dl = dl_user_positions
        .iter()
        .map(|&p| draw_path_set(&mut rng, cfg, distance(bs, p)))
        .collect();
    let ul = ul_user_positions
        .iter()
        .map(|&p| draw_path_set(&mut rng, cfg, distance(bs, p)))
        .collect();
    let ui = ul_user_positions
        .iter()
        .map(|&pj| {
            dl_user_positions
                .iter()
                .map(|&pi| draw_path_set(&mut rng, cfg, distance(pj, pi)))
                .collect()
        })
        .collect();
    let si = draw_path_set_with_variance(&mut rng, cfg, cfg.rho_si() / cfg.l_t as f64);
    let jr = ul_user_positions
        .iter()
        .map(|&p| draw_path_set(&mut rng, cfg, distance(p, bs_r)))
        .collect();

    let mut draw_sensing = |pos: [f64; 2]| {
        let departure = draw_angles(&mut rng, 1)[0];
        let arrival = draw_angles(&mut rng, 1)[0];
        let var_b = cfg.g0() * distance(bs, pos).max(1.0).powf(-cfg.alpha);
        let var_sr = cfg.g0() * distance(pos, bs_r).max(1.0).powf(-cfg.alpha);
        SensingPath {
            departure,
            arrival,
            beta_b: draw_cn(&mut rng, var_b),
            beta_sr: draw_cn(&mut rng, var_sr),
        }
    };
    let target = draw_sensing(target_position);
    let clutter = clutter_positions.iter().map(|&p| draw_sensing(p)).collect();

    Ok(Realization {
        seed,
        dl_user_positions,
        ul_user_positions,
        target_position,
        clutter_positions,
        bs_r_position: bs_r,
        dl,
        ul,
        ui,
        si,
        jr,
        target,
        clutter,
    })
}

/// Signal propagation difference (meters) of a path with elevation `theta`
/// and azimuth `phi` at a local antenna position (meters):
/// `x cos(theta) sin(phi) + y sin(theta)`.
pub fn propagation_difference(position: [f64; 2], theta: f64, phi: f64) -> f64 {
    position[0] * theta.cos() * phi.sin() + position[1] * theta.sin()
}

/// Field response vector of an antenna at `position` (meters) over the given
/// per-path `(theta, phi)` angles: entry `m` is `exp(sign * j 2pi/lambda *
/// rho_m)` with unit modulus by construction.
pub fn frv(position: [f64; 2], angles: &[[f64; 2]], lambda: f64, sign: FrvSign) -> Vec<Complex64> {
    angles
        .iter()
        .map(|&[theta, phi]| {
            let rho = propagation_difference(position, theta, phi);
            let phase = sign.factor() * std::f64::consts::TAU / lambda * rho;
            Complex64::new(phase.cos(), phase.sin())
        })
        .collect()
}

/// Tape-resident antenna coordinates, mirroring [`AntennaLayout`].
#[derive(Clone, Debug)]
pub struct LayoutVars {
    pub t_bs: Vec<[Var; 2]>,
    pub r_bs_c: Vec<[Var; 2]>,
    pub r_bs_s: Vec<[Var; 2]>,
}

impl LayoutVars {
    pub fn bind(g: &mut Graph, layout: &AntennaLayout) -> LayoutVars {
        let bind_group = |g: &mut Graph, grp: &[[f64; 2]]| {
            grp.iter()
                .map(|&[x, y]| [g.leaf(x), g.leaf(y)])
                .collect::<Vec<_>>()
        };
        LayoutVars {
            t_bs: bind_group(g, &layout.t_bs),
            r_bs_c: bind_group(g, &layout.r_bs_c),
            r_bs_s: bind_group(g, &layout.r_bs_s),
        }
    }

    pub fn group(&self, grp: AntennaGroup) -> &[[Var; 2]] {
        match grp {
            AntennaGroup::Tx => &self.t_bs,
            AntennaGroup::RxC => &self.r_bs_c,
            AntennaGroup::RxS => &self.r_bs_s,
        }
    }

    pub fn snapshot(&self, g: &Graph) -> AntennaLayout {
        let read = |grp: &[[Var; 2]]| {
            grp.iter()
                .map(|&[x, y]| [g.value(x), g.value(y)])
                .collect::<Vec<_>>()
        };
        AntennaLayout {
            t_bs: read(&self.t_bs),
            r_bs_c: read(&self.r_bs_c),
            r_bs_s: read(&self.r_bs_s),
        }
    }

    /// All coordinate vars flattened in `t_bs, r_bs_c, r_bs_s` order.
    pub fn flatten(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for grp in [&self.t_bs, &self.r_bs_c, &self.r_bs_s] {
            for p in grp {
                out.push(p[0]);
                out.push(p[1]);
            }
        }
        out
    }
}

/// Field response vector on the tape for a wavelength-relative position.
/// With positions in wavelengths the phase reduces to `sign * 2pi * rho`.
pub fn frv_tape(g: &mut Graph, pos: [Var; 2], angles: &[[f64; 2]], sign: FrvSign) -> Vec<CVar> {
    angles
        .iter()
        .map(|&[theta, phi]| {
            let cx = sign.factor() * std::f64::consts::TAU * theta.cos() * phi.sin();
            let cy = sign.factor() * std::f64::consts::TAU * theta.sin();
            let tx = g.scale(pos[0], cx);
            let ty = g.scale(pos[1], cy);
            let phase = g.add(tx, ty);
            g.cexp_j(phase)
        })
        .collect()
}

/// Stack per-antenna FRVs (columns) into a field response matrix of shape
/// `paths x antennas`.
pub fn frm_tape(
    g: &mut Graph,
    positions: &[[Var; 2]],
    angles: &[[f64; 2]],
    sign: FrvSign,
) -> Result<CMatVar> {
    let cols: Vec<Vec<CVar>> = positions
        .iter()
        .map(|&p| frv_tape(g, p, angles, sign))
        .collect();
    CMatVar::from_columns(&cols)
}

fn prm_matvar(g: &mut Graph, ps: &PathSet) -> Result<CMatVar> {
    let data = ps.prm.iter().map(|&z| g.cleaf(z)).collect();
    CMatVar::new(ps.l_r(), ps.l_t(), data)
}

/// Assemble one link channel `recv^H * prm * tx` from its field response
/// matrices. Shapes: `recv` is `l_r x n_rx`, `prm` is `l_r x l_t`, `tx` is
/// `l_t x n_tx`; the result is `n_rx x n_tx`.
pub fn assemble_link_channel(
    g: &mut Graph,
    recv: &CMatVar,
    prm: &CMatVar,
    tx: &CMatVar,
) -> Result<CMatVar> {
    if recv.rows != prm.rows || prm.cols != tx.rows {
        return Err(Error::Shape(format!(
            "link assembly mismatch: recv {}x{}, prm {}x{}, tx {}x{}",
            recv.rows, recv.cols, prm.rows, prm.cols, tx.rows, tx.cols
        )));
    }
    let recv_h = chermitian(g, recv);
    let left = cmatmul(g, &recv_h, prm)?;
    cmatmul(g, &left, tx)
}

/// Sensing steering channel: one phase entry per antenna at the hop's
/// angles, scaled by the hop's complex fading coefficient.
pub fn build_sensing_vector(
    g: &mut Graph,
    positions: &[[Var; 2]],
    angles: [f64; 2],
    beta: Complex64,
) -> Vec<CVar> {
    let b = g.cleaf(beta);
    positions
        .iter()
        .map(|&p| {
            let e = frv_tape(g, p, &[angles], FrvSign::Negative)[0];
            g.cmul(b, e)
        })
        .collect()
}

/// Every assembled channel in the system, on the tape.
#[derive(Clone, Debug)]
pub struct ChannelVars {
    /// BS -> DL user i, one coefficient per transmit antenna (`D x N_T`).
    pub h_d: Vec<Vec<CVar>>,
    /// UL user j -> BS (`U x N_Rc`).
    pub h_u: Vec<Vec<CVar>>,
    /// UL user j -> DL user i scalar, indexed `[j][i]`.
    pub h_ji: Vec<Vec<CVar>>,
    /// Residual self-interference, `N_T x N_Rc`.
    pub h_si: CMatVar,
    /// UL user j -> BS R (`U x N_Rs`).
    pub h_jr: Vec<Vec<CVar>>,
    /// BS -> target steering (`N_T`).
    pub g_bt: Vec<CVar>,
    /// Target -> BS R steering (`N_Rs`).
    pub g_srt: Vec<CVar>,
    /// BS -> clutter steering per scatterer (`C x N_T`).
    pub g_bc: Vec<Vec<CVar>>,
    /// Clutter -> BS R steering per scatterer (`C x N_Rs`).
    pub g_src: Vec<Vec<CVar>>,
}

/// Numeric snapshot of a [`ChannelVars`], for reports, hashing and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    pub h_d: Vec<Vec<Complex64>>,
    pub h_u: Vec<Vec<Complex64>>,
    pub h_ji: Vec<Vec<Complex64>>,
    /// Row-major `N_T x N_Rc`.
    pub h_si: Vec<Vec<Complex64>>,
    pub h_jr: Vec<Vec<Complex64>>,
    pub g_bt: Vec<Complex64>,
    pub g_srt: Vec<Complex64>,
    pub g_bc: Vec<Vec<Complex64>>,
    pub g_src: Vec<Vec<Complex64>>,
    pub beta_bt: Complex64,
    pub beta_srt: Complex64,
    pub beta_bc: Vec<Complex64>,
    pub beta_src: Vec<Complex64>,
}

impl ChannelVars {
    pub fn snapshot(&self, g: &Graph, real: &Realization) -> ChannelSet {
        let read = |m: &Vec<Vec<CVar>>| -> Vec<Vec<Complex64>> {
            m.iter()
                .map(|row| row.iter().map(|&z| g.cvalue(z)).collect())
                .collect()
        };
        let read1 = |v: &Vec<CVar>| -> Vec<Complex64> { v.iter().map(|&z| g.cvalue(z)).collect() };
        let h_si = (0..self.h_si.rows)
            .map(|r| self.h_si.row(r).iter().map(|&z| g.cvalue(z)).collect())
            .collect();
        ChannelSet {
            h_d: read(&self.h_d),
            h_u: read(&self.h_u),
            h_ji: read(&self.h_ji),
            h_si,
            h_jr: read(&self.h_jr),
            g_bt: read1(&self.g_bt),
            g_srt: read1(&self.g_srt),
            g_bc: read(&self.g_bc),
            g_src: read(&self.g_src),
            beta_bt: real.target.beta_b,
            beta_srt: real.target.beta_sr,
            beta_bc: real.clutter.iter().map(|s| s.beta_b).collect(),
            beta_src: real.clutter.iter().map(|s| s.beta_sr).collect(),
        }
    }
}

impl ChannelSet {
    /// SHA-256 over every coefficient in a fixed order; equal hashes mean
    /// bit-identical channels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |zs: &[Complex64]| {
            for z in zs {
                h.update(z.re.to_le_bytes());
                h.update(z.im.to_le_bytes());
            }
        };
        for m in [&self.h_d, &self.h_u, &self.h_ji, &self.h_si, &self.h_jr, &self.g_bc, &self.g_src] {
            for row in m.iter() {
                feed(row);
            }
        }
        feed(&self.g_bt);
        feed(&self.g_srt);
        feed(&[self.beta_bt, self.beta_srt]);
        feed(&self.beta_bc);
        feed(&self.beta_src);
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        for b in digest {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    /// Bind a numeric channel set onto a tape as constants. Used by tests
    /// and by metric evaluations of hand-built channels.
    pub fn bind(&self, g: &mut Graph) -> ChannelVars {
        let bind = |g: &mut Graph, m: &Vec<Vec<Complex64>>| -> Vec<Vec<CVar>> {
            m.iter()
                .map(|row| row.iter().map(|&z| g.cleaf(z)).collect())
                .collect()
        };
        let n_t = self.h_si.len();
        let n_rc = self.h_si.first().map_or(0, Vec::len);
        let mut si_data = Vec::with_capacity(n_t * n_rc);
        for row in &self.h_si {
            for &z in row {
                si_data.push(g.cleaf(z));
            }
        }
        ChannelVars {
            h_d: bind(g, &self.h_d),
            h_u: bind(g, &self.h_u),
            h_ji: bind(g, &self.h_ji),
            h_si: CMatVar::new(n_t, n_rc, si_data).expect("consistent SI shape"),
            h_jr: bind(g, &self.h_jr),
            g_bt: self.g_bt.iter().map(|&z| g.cleaf(z)).collect(),
            g_srt: self.g_srt.iter().map(|&z| g.cleaf(z)).collect(),
            g_bc: bind(g, &self.g_bc),
            g_src: bind(g, &self.g_src),
        }
    }
}

const ONES_POS: [f64; 2] = [0.0, 0.0];

/// Assemble every channel from the frozen realization and the current
/// layout. Pure in its inputs; registered on the tape so gradients flow
/// from the layout through the channels into any metric.
pub fn rebuild_channels(
    g: &mut Graph,
    cfg: &ScenarioConfig,
    layout: &LayoutVars,
    real: &Realization,
) -> Result<ChannelVars> {
    if layout.t_bs.len() != cfg.n_t || layout.r_bs_c.len() != cfg.n_rc || layout.r_bs_s.len() != cfg.n_rs {
        return Err(Error::Shape(format!(
            "layout has {}/{}/{} antennas, config wants {}/{}/{}",
            layout.t_bs.len(),
            layout.r_bs_c.len(),
            layout.r_bs_s.len(),
            cfg.n_t,
            cfg.n_rc,
            cfg.n_rs
        )));
    }

    // Single fixed antennas sit at their local origin; their FRVs are
    // constants on the tape.
    let origin = [g.leaf(ONES_POS[0]), g.leaf(ONES_POS[1])];

    // Downlink: h_{d,i} = f_i^H Sigma_{d,i} G_i, a row over transmit antennas.
    let mut h_d = Vec::with_capacity(cfg.d);
    for ps in &real.dl {
        let tx = frm_tape(g, &layout.t_bs, &ps.departure, FrvSign::Negative)?;
        let recv = frm_tape(g, &[origin], &ps.arrival, FrvSign::Negative)?;
        let prm = prm_matvar(g, ps)?;
        let ch = assemble_link_channel(g, &recv, &prm, &tx)?;
        h_d.push(ch.row(0).to_vec());
    }

    // Uplink: h_{u,j} = F_j^H Sigma_{u,j} g_j, a column over BS receive antennas.
    let mut h_u = Vec::with_capacity(cfg.u);
    for ps in &real.ul {
        let recv = frm_tape(g, &layout.r_bs_c, &ps.arrival, FrvSign::Negative)?;
        let tx = frm_tape(g, &[origin], &ps.departure, FrvSign::Negative)?;
        let prm = prm_matvar(g, ps)?;
        let ch = assemble_link_channel(g, &recv, &prm, &tx)?;
        h_u.push(ch.column(0));
    }

    // UL -> DL user interference: scalar per pair, no BS antennas involved.
    let mut h_ji = Vec::with_capacity(cfg.u);
    for row in &real.ui {
        let mut per_i = Vec::with_capacity(cfg.d);
        for ps in row {
            let recv = frm_tape(g, &[origin], &ps.arrival, FrvSign::Negative)?;
            let tx = frm_tape(g, &[origin], &ps.departure, FrvSign::Negative)?;
            let prm = prm_matvar(g, ps)?;
            let ch = assemble_link_channel(g, &recv, &prm, &tx)?;
            per_i.push(ch.at(0, 0));
        }
        h_ji.push(per_i);
    }

    // Self-interference: H_SI = (F_SI^H Sigma_SI G_SI)^T, positive exponent
    // on both sides.
    let h_si = {
        let recv = frm_tape(g, &layout.r_bs_c, &real.si.arrival, FrvSign::Positive)?;
        let tx = frm_tape(g, &layout.t_bs, &real.si.departure, FrvSign::Positive)?;
        let prm = prm_matvar(g, &real.si)?;
        let ch = assemble_link_channel(g, &recv, &prm, &tx)?;
        ch.transpose()
    };

    // UL user -> BS R interference, same structure as the uplink channel.
    let mut h_jr = Vec::with_capacity(cfg.u);
    for ps in &real.jr {
        let recv = frm_tape(g, &layout.r_bs_s, &ps.arrival, FrvSign::Negative)?;
        let tx = frm_tape(g, &[origin], &ps.departure, FrvSign::Negative)?;
        let prm = prm_matvar(g, ps)?;
        let ch = assemble_link_channel(g, &recv, &prm, &tx)?;
        h_jr.push(ch.column(0));
    }

    // Sensing steering channels.
    let g_bt = build_sensing_vector(g, &layout.t_bs, real.target.departure, real.target.beta_b);
    let g_srt = build_sensing_vector(g, &layout.r_bs_s, real.target.arrival, real.target.beta_sr);
    let mut g_bc = Vec::with_capacity(cfg.c);
    let mut g_src = Vec::with_capacity(cfg.c);
    for s in &real.clutter {
        g_bc.push(build_sensing_vector(g, &layout.t_bs, s.departure, s.beta_b));
        g_src.push(build_sensing_vector(g, &layout.r_bs_s, s.arrival, s.beta_sr));
    }

    Ok(ChannelVars {
        h_d,
        h_u,
        h_ji,
        h_si,
        h_jr,
        g_bt,
        g_srt,
        g_bc,
        g_src,
    })
}

/// Convenience: sample, bind a layout, and snapshot the channels in one
/// call.
pub fn channels_at(
    cfg: &ScenarioConfig,
    layout: &AntennaLayout,
    real: &Realization,
) -> Result<ChannelSet> {
    let mut g = Graph::new();
    let lv = LayoutVars::bind(&mut g, layout);
    let cv = rebuild_channels(&mut g, cfg, &lv, real)?;
    g.check_fault()?;
    Ok(cv.snapshot(&g, real))
}
