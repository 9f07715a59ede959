//! Downlink/uplink rates, echo SINR, and the log-domain sensing objective.
//!
//! All metrics are built on the differentiation tape; the numeric entry
//! points evaluate the same tape code on a scratch graph, so there is a
//! single implementation of every formula.

use num_complex::Complex64;
use serde::Serialize;

use crate::channel::{AntennaLayout, ChannelSet, ChannelVars, LayoutVars, ANTENNA_GROUPS};
use crate::config::ScenarioConfig;
use crate::diffcore::{cdot_h, cnorm_sq, CVar, Graph, Var};
use crate::error::{Error, Result};

/// Substitute for the log-domain objective when the echo numerator is
/// exactly zero, keeping optimization losses finite.
pub const LAMBDA_ZERO_SENTINEL: f64 = -1e6;

/// Reading of the residual self-interference term in the uplink rate.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum SiForm {
    /// `|z^H H_SI^H (sum_i p_i)|^2`, the standard residual-SI quadratic
    /// form. The default.
    #[default]
    Quadratic,
    /// `||z||^2 * ||H_SI^H (sum_i p_i)||^2`, the factored product-of-norms
    /// compatibility variant.
    FactoredNorms,
}

/// The optimizable beamforming blocks together with the antenna layout.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BeamformingState {
    /// Transmit beams, one column of length `n_t` per DL user.
    pub p: Vec<Vec<Complex64>>,
    /// Uplink transmit powers (W), nonnegative.
    pub p_u: Vec<f64>,
    /// Uplink receive beams, one column of length `n_rc` per UL user.
    pub z: Vec<Vec<Complex64>>,
    /// Echo receive beam at BS R, length `n_rs`.
    pub v: Vec<Complex64>,
    pub layout: AntennaLayout,
}

impl BeamformingState {
    pub fn validate(&self, cfg: &ScenarioConfig) -> Result<()> {
        let dims_ok = self.p.len() == cfg.d
            && self.p.iter().all(|c| c.len() == cfg.n_t)
            && self.p_u.len() == cfg.u
            && self.z.len() == cfg.u
            && self.z.iter().all(|c| c.len() == cfg.n_rc)
            && self.v.len() == cfg.n_rs
            && self.layout.t_bs.len() == cfg.n_t
            && self.layout.r_bs_c.len() == cfg.n_rc
            && self.layout.r_bs_s.len() == cfg.n_rs;
        if !dims_ok {
            return Err(Error::Shape("beamforming state does not match config".into()));
        }
        if self.p_u.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("uplink powers must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Tape-resident beamforming state.
#[derive(Clone, Debug)]
pub struct StateVars {
    pub p: Vec<Vec<CVar>>,
    pub p_u: Vec<Var>,
    pub z: Vec<Vec<CVar>>,
    pub v: Vec<CVar>,
    pub layout: LayoutVars,
}

impl StateVars {
    pub fn bind(g: &mut Graph, state: &BeamformingState) -> StateVars {
        let bind_cols = |g: &mut Graph, cols: &[Vec<Complex64>]| {
            cols.iter()
                .map(|col| col.iter().map(|&z| g.cleaf(z)).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        StateVars {
            p: bind_cols(g, &state.p),
            p_u: state.p_u.iter().map(|&x| g.leaf(x)).collect(),
            z: bind_cols(g, &state.z),
            v: state.v.iter().map(|&z| g.cleaf(z)).collect(),
            layout: LayoutVars::bind(g, &state.layout),
        }
    }

    pub fn snapshot(&self, g: &Graph) -> BeamformingState {
        let read_cols = |cols: &[Vec<CVar>]| {
            cols.iter()
                .map(|col| col.iter().map(|&z| g.cvalue(z)).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        BeamformingState {
            p: read_cols(&self.p),
            p_u: self.p_u.iter().map(|&x| g.value(x)).collect(),
            z: read_cols(&self.z),
            v: self.v.iter().map(|&z| g.cvalue(z)).collect(),
            layout: self.layout.snapshot(g),
        }
    }
}

/// Rate of DL user `i` (bit/s/Hz): desired beam power over intra-cell
/// interference, uplink leakage, and noise.
pub fn dl_rate_tape(
    g: &mut Graph,
    ch: &ChannelVars,
    st: &StateVars,
    cfg: &ScenarioConfig,
    i: usize,
) -> Result<Var> {
    let h = &ch.h_d[i];
    let sig_amp = cdot_h(g, h, &st.p[i])?;
    let sig = g.cmodsq(sig_amp);
    let mut den = g.leaf(cfg.sigma_d2);
    for (ip, p) in st.p.iter().enumerate() {
        if ip == i {
            continue;
        }
        let amp = cdot_h(g, h, p)?;
        let pw = g.cmodsq(amp);
        den = g.add(den, pw);
    }
    for (j, &pu) in st.p_u.iter().enumerate() {
        let hji = g.cmodsq(ch.h_ji[j][i]);
        let t = g.mul(pu, hji);
        den = g.add(den, t);
    }
    let ratio = g.div(sig, den);
    let one_plus = g.add_const(ratio, 1.0);
    Ok(g.log2(one_plus))
}

/// Rate of UL user `j` (bit/s/Hz): combined uplink signal over inter-user
/// interference, residual self-interference, and combiner noise.
pub fn ul_rate_tape(
    g: &mut Graph,
    ch: &ChannelVars,
    st: &StateVars,
    cfg: &ScenarioConfig,
    j: usize,
    si_form: SiForm,
) -> Result<Var> {
    let z = &st.z[j];
    let sig_amp = cdot_h(g, z, &ch.h_u[j])?;
    let sig_pow = g.cmodsq(sig_amp);
    let sig = g.mul(st.p_u[j], sig_pow);

    let mut i_ui = g.leaf(0.0);
    for (jp, h) in ch.h_u.iter().enumerate() {
        if jp == j {
            continue;
        }
        let amp = cdot_h(g, z, h)?;
        let pw = g.cmodsq(amp);
        let t = g.mul(st.p_u[jp], pw);
        i_ui = g.add(i_ui, t);
    }

    // Combined downlink transmission sum_i p_i as seen through the SI
    // channel: t = H_SI^H (sum_i p_i), one entry per BS receive antenna.
    let n_t = ch.h_si.rows;
    let n_rc = ch.h_si.cols;
    let mut s = Vec::with_capacity(n_t);
    for n in 0..n_t {
        let per_beam: Vec<CVar> = st.p.iter().map(|col| col[n]).collect();
        s.push(g.csum(&per_beam));
    }
    let mut t = Vec::with_capacity(n_rc);
    for r in 0..n_rc {
        let mut acc = g.cleaf(Complex64::new(0.0, 0.0));
        for (n, &sn) in s.iter().enumerate() {
            let term = g.cmul_conj(ch.h_si.at(n, r), sn);
            acc = g.cadd(acc, term);
        }
        t.push(acc);
    }
    let i_si = match si_form {
        SiForm::Quadratic => {
            let amp = cdot_h(g, z, &t)?;
            g.cmodsq(amp)
        }
        SiForm::FactoredNorms => {
            let zn = cnorm_sq(g, z);
            let tn = cnorm_sq(g, &t);
            g.mul(zn, tn)
        }
    };

    let zn = cnorm_sq(g, z);
    let noise = g.scale(zn, cfg.sigma_u2);
    let den0 = g.add(i_ui, i_si);
    let den = g.add(den0, noise);
    let ratio = g.div(sig, den);
    let one_plus = g.add_const(ratio, 1.0);
    Ok(g.log2(one_plus))
}

/// Echo SINR at BS R (linear) and its base-2 logarithm. A numerically zero
/// numerator maps the log value to [`LAMBDA_ZERO_SENTINEL`] so optimization
/// losses stay finite; callers flag such states infeasible.
pub fn sensing_objective_tape(
    g: &mut Graph,
    ch: &ChannelVars,
    st: &StateVars,
    cfg: &ScenarioConfig,
) -> Result<(Var, Var)> {
    let a = cdot_h(g, &st.v, &ch.g_srt)?;
    let a_pow = g.cmodsq(a);
    let mut beam_pow = g.leaf(0.0);
    for p in &st.p {
        let b = cdot_h(g, &ch.g_bt, p)?;
        let bp = g.cmodsq(b);
        beam_pow = g.add(beam_pow, bp);
    }
    let num_raw = g.mul(a_pow, beam_pow);
    let num = g.scale(num_raw, cfg.alpha_t);

    let mut i_d = g.leaf(0.0);
    for (j, h) in ch.h_jr.iter().enumerate() {
        let amp = cdot_h(g, &st.v, h)?;
        let pw = g.cmodsq(amp);
        let t = g.mul(st.p_u[j], pw);
        i_d = g.add(i_d, t);
    }

    let mut i_c = g.leaf(0.0);
    for (c, g_src) in ch.g_src.iter().enumerate() {
        let ac = cdot_h(g, &st.v, g_src)?;
        let ac_pow = g.cmodsq(ac);
        let mut beams = g.leaf(0.0);
        for p in &st.p {
            let b = cdot_h(g, &ch.g_bc[c], p)?;
            let bp = g.cmodsq(b);
            beams = g.add(beams, bp);
        }
        let term = g.mul(ac_pow, beams);
        i_c = g.add(i_c, term);
    }
    let i_c = g.scale(i_c, cfg.alpha_c);

    let vn = cnorm_sq(g, &st.v);
    let noise = g.scale(vn, cfg.sigma_s2);
    let den0 = g.add(i_d, i_c);
    let den = g.add(den0, noise);
    let sinr = g.div(num, den);
    let lambda = if g.value(num) == 0.0 {
        g.leaf(LAMBDA_ZERO_SENTINEL)
    } else {
        g.log2(sinr)
    };
    Ok((sinr, lambda))
}

/// Total FD BS transmit power `Tr(P P^H)`: the sum of squared moduli of
/// every beamforming entry.
pub fn transmit_power_tape(g: &mut Graph, st: &StateVars) -> Var {
    let mut acc = g.leaf(0.0);
    for col in &st.p {
        let n = cnorm_sq(g, col);
        acc = g.add(acc, n);
    }
    acc
}

/// All tape metrics of one state, computed together. Carries the uplink
/// power vars alongside so penalty builders can reach them.
pub struct MetricVars {
    pub r_d: Vec<Var>,
    pub r_u: Vec<Var>,
    pub sinr: Var,
    pub lambda: Var,
    pub tx_power: Var,
    pub p_u: Vec<Var>,
}

pub fn metrics_tape(
    g: &mut Graph,
    ch: &ChannelVars,
    st: &StateVars,
    cfg: &ScenarioConfig,
    si_form: SiForm,
) -> Result<MetricVars> {
    let r_d = (0..cfg.d)
        .map(|i| dl_rate_tape(g, ch, st, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let r_u = (0..cfg.u)
        .map(|j| ul_rate_tape(g, ch, st, cfg, j, si_form))
        .collect::<Result<Vec<_>>>()?;
    let (sinr, lambda) = sensing_objective_tape(g, ch, st, cfg)?;
    let tx_power = transmit_power_tape(g, st);
    Ok(MetricVars {
        r_d,
        r_u,
        sinr,
        lambda,
        tx_power,
        p_u: st.p_u.clone(),
    })
}

/// Flat numeric record of every metric and constraint slack of one state.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct MetricsReport {
    pub r_d: Vec<f64>,
    pub r_u: Vec<f64>,
    pub sinr_linear: f64,
    pub lambda_t: f64,
    pub tx_power: f64,
    /// `r_d[i] - r_th_d`.
    pub slack_r_d: Vec<f64>,
    /// `r_u[j] - r_th_u`.
    pub slack_r_u: Vec<f64>,
    /// `lambda_t - lambda_th_s`.
    pub slack_lambda: f64,
    /// `p_bs - tx_power`.
    pub slack_power_budget: f64,
    /// `p_u_max - p_u[j]`.
    pub slack_p_u: Vec<f64>,
    /// Per group `t_bs, r_bs_c, r_bs_s`: min pairwise distance minus `ds`
    /// (wavelengths).
    pub slack_spacing: [f64; 3],
    /// Per group: smallest margin to the region box (wavelengths); negative
    /// when any coordinate leaves the region.
    pub slack_region: [f64; 3],
}

impl MetricsReport {
    pub fn csv_header(d: usize, u: usize) -> String {
        let mut cols = Vec::new();
        for i in 0..d {
            cols.push(format!("r_d_{i}"));
        }
        for j in 0..u {
            cols.push(format!("r_u_{j}"));
        }
        cols.extend(
            ["sinr_linear", "lambda_t", "tx_power"]
                .iter()
                .map(|s| s.to_string()),
        );
        for i in 0..d {
            cols.push(format!("slack_r_d_{i}"));
        }
        for j in 0..u {
            cols.push(format!("slack_r_u_{j}"));
        }
        cols.extend(
            ["slack_lambda", "slack_power_budget"]
                .iter()
                .map(|s| s.to_string()),
        );
        for j in 0..u {
            cols.push(format!("slack_p_u_{j}"));
        }
        for grp in ANTENNA_GROUPS {
            cols.push(format!("slack_spacing_{}", grp.name()));
        }
        for grp in ANTENNA_GROUPS {
            cols.push(format!("slack_region_{}", grp.name()));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut vals: Vec<f64> = Vec::new();
        vals.extend(&self.r_d);
        vals.extend(&self.r_u);
        vals.extend([self.sinr_linear, self.lambda_t, self.tx_power]);
        vals.extend(&self.slack_r_d);
        vals.extend(&self.slack_r_u);
        vals.extend([self.slack_lambda, self.slack_power_budget]);
        vals.extend(&self.slack_p_u);
        vals.extend(self.slack_spacing);
        vals.extend(self.slack_region);
        vals.iter()
            .map(|v| format!("{v:.16e}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn spacing_slack(points: &[[f64; 2]], ds: f64, region_side: f64) -> f64 {
    let mut min_d = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = ((points[i][0] - points[j][0]).powi(2)
                + (points[i][1] - points[j][1]).powi(2))
            .sqrt();
            min_d = min_d.min(d);
        }
    }
    if min_d.is_finite() {
        min_d - ds
    } else {
        region_side // vacuous for a single antenna
    }
}

fn region_slack(points: &[[f64; 2]], region_side: f64) -> f64 {
    let mut m = region_side / 2.0;
    for p in points {
        for &c in p {
            m = m.min(c).min(region_side - c);
        }
    }
    m
}

/// Geometry slacks of a layout, independent of any channel or beams.
pub fn layout_slacks(layout: &AntennaLayout, cfg: &ScenarioConfig) -> ([f64; 3], [f64; 3]) {
    let mut spacing = [0.0; 3];
    let mut region = [0.0; 3];
    for (k, grp) in ANTENNA_GROUPS.iter().enumerate() {
        let pts = layout.group(*grp);
        spacing[k] = spacing_slack(pts, cfg.ds, cfg.region_side);
        region[k] = region_slack(pts, cfg.region_side);
    }
    (spacing, region)
}

/// Evaluate every metric and slack of a state against the given channels.
pub fn full_report(
    ch: &ChannelSet,
    state: &BeamformingState,
    cfg: &ScenarioConfig,
) -> Result<MetricsReport> {
    full_report_with(ch, state, cfg, SiForm::Quadratic)
}

pub fn full_report_with(
    ch: &ChannelSet,
    state: &BeamformingState,
    cfg: &ScenarioConfig,
    si_form: SiForm,
) -> Result<MetricsReport> {
    state.validate(cfg)?;
    let mut g = Graph::new();
    let chv = ch.bind(&mut g);
    let st = StateVars::bind(&mut g, state);
    let m = metrics_tape(&mut g, &chv, &st, cfg, si_form)?;
    g.check_fault()?;

    let r_d = g.values(&m.r_d);
    let r_u = g.values(&m.r_u);
    let sinr_linear = g.value(m.sinr);
    let lambda_t = if sinr_linear == 0.0 {
        f64::NEG_INFINITY
    } else {
        g.value(m.lambda)
    };
    let tx_power = g.value(m.tx_power);
    let (slack_spacing, slack_region) = layout_slacks(&state.layout, cfg);
    Ok(MetricsReport {
        slack_r_d: r_d.iter().map(|r| r - cfg.r_th_d).collect(),
        slack_r_u: r_u.iter().map(|r| r - cfg.r_th_u).collect(),
        slack_lambda: lambda_t - cfg.lambda_th_s,
        slack_power_budget: cfg.p_bs - tx_power,
        slack_p_u: state.p_u.iter().map(|p| cfg.p_u_max - p).collect(),
        slack_spacing,
        slack_region,
        r_d,
        r_u,
        sinr_linear,
        lambda_t,
        tx_power,
    })
}
