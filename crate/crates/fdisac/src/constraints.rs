//! Meta-loss penalties, projections, and geometric repairs.
//!
//! Two penalty modes exist side by side: the indicator form (0/1 per
//! violated constraint, piecewise constant) for reported loss values, and a
//! normalized-hinge form that is continuous, vanishes exactly on the
//! feasible side, and actually carries gradient into the learners. The
//! power projection, unit-modulus normalization and layout clamp are hard
//! constraints applied inside the optimizers.

use num_complex::Complex64;
use serde::Serialize;

use crate::channel::{AntennaGroup, AntennaLayout, LayoutVars, ANTENNA_GROUPS};
use crate::config::{PenaltyMode, ScenarioConfig};
use crate::diffcore::{CVar, Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{layout_slacks, MetricVars, MetricsReport, LAMBDA_ZERO_SENTINEL};

/// Slack tolerance: a constraint counts as satisfied when its slack is at
/// least `-FEAS_TOL`.
pub const FEAS_TOL: f64 = 1e-9;

/// Safety margin applied when the spacing repair re-places an antenna.
const REPAIR_MARGIN: f64 = 1e-9;
/// Bound on repair sweeps before the layout is declared infeasible.
const MAX_REPAIR_SWEEPS: usize = 50;

/// The six meta-loss components. `total` is their sum; in indicator mode
/// every penalty term is `zeta * k` for an integer violation count `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetaLossBreakdown {
    pub target_term: f64,
    pub ths_term: f64,
    pub thd_term: f64,
    pub thu_term: f64,
    pub up_term: f64,
    pub ma_term: f64,
    pub total: f64,
    pub mode: PenaltyMode,
}

/// Continuous surrogate of the 0/1 violation indicator: the normalized
/// gap `(T - Q)/T`, clipped to `[0, 1]` so a deep violation saturates at
/// the indicator's own value instead of flooding the loss.
fn hinge_normalized(threshold: f64, value: f64) -> f64 {
    let gap = (threshold - value).max(0.0);
    let scaled = if threshold > 0.0 { gap / threshold } else { gap };
    scaled.min(1.0)
}

fn indicator(threshold: f64, value: f64) -> f64 {
    if threshold - value > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Meta-loss of one evaluated state: `-Lambda_t` plus the QoS, uplink-power
/// and antenna-spacing penalties.
pub fn meta_loss(
    report: &MetricsReport,
    cfg: &ScenarioConfig,
    mode: PenaltyMode,
) -> MetaLossBreakdown {
    let lambda = if report.lambda_t == f64::NEG_INFINITY {
        LAMBDA_ZERO_SENTINEL
    } else {
        report.lambda_t
    };
    let target_term = -lambda;

    let pen = |threshold: f64, value: f64| -> f64 {
        match mode {
            PenaltyMode::PaperIndicator => indicator(threshold, value),
            PenaltyMode::SoftHinge => hinge_normalized(threshold, value),
        }
    };

    let thd_term = cfg.zeta_thd * report.r_d.iter().map(|&r| pen(cfg.r_th_d, r)).sum::<f64>();
    let thu_term = cfg.zeta_thu * report.r_u.iter().map(|&r| pen(cfg.r_th_u, r)).sum::<f64>();
    let ths_term = cfg.zeta_ths * pen(cfg.lambda_th_s, lambda);

    let up_term = cfg.zeta_2
        * report
            .slack_p_u
            .iter()
            .map(|&slack| match mode {
                // slack = p_u_max - p_u; violation when slack < 0.
                PenaltyMode::PaperIndicator => {
                    if slack < 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                PenaltyMode::SoftHinge => ((-slack).max(0.0) / cfg.p_u_max).min(1.0),
            })
            .sum::<f64>();

    // Spacing aggregate over all groups and pairs: the worst `ds - dist`.
    let omega = -report
        .slack_spacing
        .iter()
        .fold(f64::INFINITY, |m, &s| m.min(s));
    let ma_term = cfg.zeta_3
        * match mode {
            PenaltyMode::PaperIndicator => {
                if omega > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            PenaltyMode::SoftHinge => (omega.max(0.0) / cfg.ds).min(1.0),
        };

    let total = target_term + ths_term + thd_term + thu_term + up_term + ma_term;
    MetaLossBreakdown {
        target_term,
        ths_term,
        thd_term,
        thu_term,
        up_term,
        ma_term,
        total,
        mode,
    }
}

/// Tape version of [`meta_loss`], returning the total. Indicator penalties
/// enter as constants (their gradient is zero almost everywhere); hinge
/// penalties are differentiable tape expressions.
pub fn meta_loss_tape(
    g: &mut Graph,
    m: &MetricVars,
    layout: &LayoutVars,
    cfg: &ScenarioConfig,
    mode: PenaltyMode,
) -> Var {
    let lambda = if g.value(m.sinr) == 0.0 {
        g.leaf(LAMBDA_ZERO_SENTINEL)
    } else {
        m.lambda
    };
    let mut total = g.neg(lambda);

    let hinge = |g: &mut Graph, threshold: f64, value: Var, zeta: f64| -> Var {
        match mode {
            PenaltyMode::PaperIndicator => {
                let k = indicator(threshold, g.value(value));
                g.leaf(zeta * k)
            }
            PenaltyMode::SoftHinge => {
                let t = g.leaf(threshold);
                let gap = g.sub(t, value);
                let pos = g.max_const(gap, 0.0);
                let norm = if threshold > 0.0 { threshold } else { 1.0 };
                let scaled = g.scale(pos, 1.0 / norm);
                let one = g.leaf(1.0);
                let capped = g.min(scaled, one);
                g.scale(capped, zeta)
            }
        }
    };

    for &r in &m.r_d {
        let p = hinge(g, cfg.r_th_d, r, cfg.zeta_thd);
        total = g.add(total, p);
    }
    for &r in &m.r_u {
        let p = hinge(g, cfg.r_th_u, r, cfg.zeta_thu);
        total = g.add(total, p);
    }
    let p = hinge(g, cfg.lambda_th_s, lambda, cfg.zeta_ths);
    total = g.add(total, p);

    // Uplink power cap.
    for &pu in &m.p_u {
        let term = match mode {
            PenaltyMode::PaperIndicator => {
                let k = if g.value(pu) > cfg.p_u_max { 1.0 } else { 0.0 };
                g.leaf(cfg.zeta_2 * k)
            }
            PenaltyMode::SoftHinge => {
                let cap = g.leaf(cfg.p_u_max);
                let over = g.sub(pu, cap);
                let pos = g.max_const(over, 0.0);
                let scaled = g.scale(pos, 1.0 / cfg.p_u_max);
                let one = g.leaf(1.0);
                let capped = g.min(scaled, one);
                g.scale(capped, cfg.zeta_2)
            }
        };
        total = g.add(total, term);
    }

    // Spacing aggregate.
    let omega = spacing_omega_tape(g, layout, cfg);
    let term = match mode {
        PenaltyMode::PaperIndicator => {
            let k = if g.value(omega) > 0.0 { 1.0 } else { 0.0 };
            g.leaf(cfg.zeta_3 * k)
        }
        PenaltyMode::SoftHinge => {
            let pos = g.max_const(omega, 0.0);
            let scaled = g.scale(pos, 1.0 / cfg.ds);
            let one = g.leaf(1.0);
            let capped = g.min(scaled, one);
            g.scale(capped, cfg.zeta_3)
        }
    };
    g.add(total, term)
}

/// Worst spacing violation `max(ds - dist)` over every antenna pair of
/// every group, on the tape.
fn spacing_omega_tape(g: &mut Graph, layout: &LayoutVars, cfg: &ScenarioConfig) -> Var {
    let mut omega = g.leaf(f64::MIN);
    for grp in ANTENNA_GROUPS {
        let pts = layout.group(grp);
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d = pair_distance_tape(g, pts[i], pts[j]);
                let ds = g.leaf(cfg.ds);
                let a = g.sub(ds, d);
                omega = g.max(omega, a);
            }
        }
    }
    omega
}

/// Distance between two tape points, guarded below `1e-12` so coincident
/// antennas cannot blow up the backward sweep.
fn pair_distance_tape(g: &mut Graph, a: [Var; 2], b: [Var; 2]) -> Var {
    let dx = g.sub(a[0], b[0]);
    let dy = g.sub(a[1], b[1]);
    let dx2 = g.square(dx);
    let dy2 = g.square(dy);
    let sum = g.add(dx2, dy2);
    let guarded = g.max_const(sum, 1e-24);
    g.sqrt(guarded)
}

/// Project the transmit beams onto the power budget: unchanged when
/// `Tr(P P^H) <= p_bs`, otherwise scaled by `sqrt(p_bs / Tr)`. Idempotent
/// bit-for-bit, and the result never exceeds the budget.
pub fn project_transmit_power(p: &[Vec<Complex64>], p_bs: f64) -> Vec<Vec<Complex64>> {
    let tr: f64 = p.iter().flatten().map(|z| z.norm_sqr()).sum();
    if tr <= p_bs {
        return p.to_vec();
    }
    let mut s = (p_bs / tr).sqrt();
    loop {
        let scaled: Vec<Vec<Complex64>> = p
            .iter()
            .map(|col| col.iter().map(|&z| z * s).collect())
            .collect();
        let tr2: f64 = scaled.iter().flatten().map(|z| z.norm_sqr()).sum();
        if tr2 <= p_bs {
            return scaled;
        }
        // Rounding pushed the trace a few ulps over; nudge the scale down.
        s *= 1.0 - f64::EPSILON;
    }
}

/// Tape version of the power projection. The scale factor is a tape
/// expression, so gradients flow through the normalization.
pub fn project_transmit_power_tape(g: &mut Graph, p: &mut [Vec<CVar>], p_bs: f64) {
    let mut tr = g.leaf(0.0);
    for col in p.iter() {
        for &z in col.iter() {
            let m = g.cmodsq(z);
            tr = g.add(tr, m);
        }
    }
    if g.value(tr) <= p_bs {
        return;
    }
    let budget = g.leaf(p_bs);
    let ratio = g.div(budget, tr);
    let mut s = g.sqrt(ratio);
    loop {
        let mut tr2 = 0.0;
        for col in p.iter() {
            for &z in col.iter() {
                let zs = g.cvalue(z) * g.value(s);
                tr2 += zs.norm_sqr();
            }
        }
        if tr2 <= p_bs {
            break;
        }
        s = g.scale(s, 1.0 - f64::EPSILON);
    }
    for col in p.iter_mut() {
        for z in col.iter_mut() {
            *z = g.cscale(*z, s);
        }
    }
}

/// Rescale every entry of every uplink combiner column and of the sensing
/// combiner to unit modulus; zero entries map to `1 + 0j`.
pub fn normalize_receive_beams(
    z: &[Vec<Complex64>],
    v: &[Complex64],
) -> (Vec<Vec<Complex64>>, Vec<Complex64>) {
    let norm_one = |x: &Complex64| -> Complex64 {
        let m = x.norm();
        if m == 0.0 {
            Complex64::new(1.0, 0.0)
        } else {
            x / m
        }
    };
    (
        z.iter()
            .map(|col| col.iter().map(norm_one).collect())
            .collect(),
        v.iter().map(norm_one).collect(),
    )
}

/// Tape version of the unit-modulus normalization for one complex vector.
pub fn normalize_unit_modulus_tape(g: &mut Graph, v: &mut [CVar]) {
    for z in v.iter_mut() {
        let val = g.cvalue(*z);
        if val.norm() == 0.0 {
            *z = g.cleaf(Complex64::new(1.0, 0.0));
        } else {
            let msq = g.cmodsq(*z);
            let m = g.sqrt(msq);
            *z = g.cdiv_re(*z, m);
        }
    }
}

/// Clamp every coordinate into its region box, then greedily repair
/// spacing: the later-indexed antenna of any violating pair is moved along
/// the pair's separating direction to distance `ds` (with a tiny margin).
/// When the box clamp defeats the radial push, the antenna slides along the
/// wall instead. Bounded sweeps; an unrepairable layout is an error.
pub fn clamp_layout_tape(
    g: &mut Graph,
    layout: &mut LayoutVars,
    cfg: &ScenarioConfig,
) -> Result<()> {
    for grp in ANTENNA_GROUPS {
        let pts: &mut Vec<[Var; 2]> = match grp {
            AntennaGroup::Tx => &mut layout.t_bs,
            AntennaGroup::RxC => &mut layout.r_bs_c,
            AntennaGroup::RxS => &mut layout.r_bs_s,
        };
        for p in pts.iter_mut() {
            p[0] = g.clamp(p[0], 0.0, cfg.region_side);
            p[1] = g.clamp(p[1], 0.0, cfg.region_side);
        }
        let mut repaired = false;
        for sweep in 0..MAX_REPAIR_SWEEPS {
            let mut changed = false;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    let (pi, pj) = (pts[i], pts[j]);
                    let a = Complex64::new(g.value(pi[0]), g.value(pi[1]));
                    let b = Complex64::new(g.value(pj[0]), g.value(pj[1]));
                    let dist = (a - b).norm();
                    if dist >= cfg.ds - 1e-12 {
                        continue;
                    }
                    changed = true;
                    let others: Vec<[f64; 2]> = pts
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| k != j)
                        .map(|(_, p)| [g.value(p[0]), g.value(p[1])])
                        .collect();
                    pts[j] = repair_position(g, pi, pj, dist, cfg, &others, sweep);
                }
            }
            if !changed {
                repaired = true;
                break;
            }
        }
        if !repaired {
            // The sweep limit ran out; accept only if the final state is
            // actually feasible.
            let mut ok = true;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    let a = Complex64::new(g.value(pts[i][0]), g.value(pts[i][1]));
                    let b = Complex64::new(g.value(pts[j][0]), g.value(pts[j][1]));
                    if (a - b).norm() < cfg.ds - 1e-12 {
                        ok = false;
                    }
                }
            }
            if !ok {
                return Err(Error::InfeasibleLayout(format!(
                    "spacing repair did not converge in {MAX_REPAIR_SWEEPS} sweeps for group {}",
                    grp.name()
                )));
            }
        }
    }
    Ok(())
}

/// One greedy repair move: push `pj` away from `pi` along their separating
/// direction to distance `ds * (1 + margin)`, staying inside the region
/// box. When that landing spot collides with another antenna the push
/// extends further along the same ray; when the box clamp defeats the push
/// the antenna slides along the wall instead.
fn repair_position(
    g: &mut Graph,
    pi: [Var; 2],
    pj: [Var; 2],
    dist: f64,
    cfg: &ScenarioConfig,
    others: &[[f64; 2]],
    sweep: usize,
) -> [Var; 2] {
    let side = cfg.region_side;
    let target = cfg.ds * (1.0 + REPAIR_MARGIN);
    let (xi, yi) = (g.value(pi[0]), g.value(pi[1]));
    let clear = |p: [f64; 2]| -> bool {
        others
            .iter()
            .all(|o| ((p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2)).sqrt() >= cfg.ds - 1e-12)
    };

    if dist < 1e-9 {
        // Coincident pair: separate along an axis, extending past occupied
        // spots, in a fixed candidate order.
        for k in 1..=others.len() + 1 {
            let step = target * k as f64;
            for (axis, off) in [(0usize, step), (0, -step), (1, step), (1, -step)] {
                let cand = match axis {
                    0 => [xi + off, yi],
                    _ => [xi, yi + off],
                };
                if (0.0..=side).contains(&cand[axis]) && clear(cand) {
                    let o = g.leaf(off);
                    let moved = g.add(pi[axis], o);
                    return if axis == 0 { [moved, pj[1]] } else { [pj[0], moved] };
                }
            }
        }
        return pj; // no room on either axis; later sweeps or the caller fail
    }

    // Radial push, extending along the ray until the landing spot clears
    // every other antenna. Fruitless early sweeps rotate the direction so a
    // degenerate line of antennas (everything clamped onto one wall) can
    // still spread into the plane.
    let rot = if sweep < 10 {
        0.0
    } else {
        0.7 * (sweep - 9) as f64
    };
    let (rc, rs) = (rot.cos(), rot.sin());
    let d = pair_distance_tape(g, pi, pj);
    let (xj, yj) = (g.value(pj[0]), g.value(pj[1]));
    let dir = [
        (rc * (xj - xi) - rs * (yj - yi)) / dist,
        (rs * (xj - xi) + rc * (yj - yi)) / dist,
    ];
    let mut push = target;
    for k in 1..=others.len() + 1 {
        let step = target * k as f64;
        let cand = [xi + dir[0] * step, yi + dir[1] * step];
        let in_box = (0.0..=side).contains(&cand[0]) && (0.0..=side).contains(&cand[1]);
        if in_box && clear(cand) {
            push = step;
            break;
        }
    }
    let t = g.leaf(push);
    let scale = g.div(t, d);
    let dx0 = g.sub(pj[0], pi[0]);
    let dy0 = g.sub(pj[1], pi[1]);
    let (dx, dy) = if rot == 0.0 {
        (dx0, dy0)
    } else {
        let a = g.scale(dx0, rc);
        let b = g.scale(dy0, rs);
        let c = g.scale(dx0, rs);
        let e = g.scale(dy0, rc);
        (g.sub(a, b), g.add(c, e))
    };
    let sx = g.mul(dx, scale);
    let sy = g.mul(dy, scale);
    let raw = [g.add(pi[0], sx), g.add(pi[1], sy)];
    let clamped = [g.clamp(raw[0], 0.0, side), g.clamp(raw[1], 0.0, side)];

    let cv = [g.value(clamped[0]), g.value(clamped[1])];
    if (Complex64::new(cv[0], cv[1]) - Complex64::new(xi, yi)).norm() >= cfg.ds - 1e-12
        && clear(cv)
    {
        return clamped;
    }

    // The box clamp defeated the push. Keep the clamped coordinate on its
    // wall and shift the other coordinate so the distance to `pi` reaches
    // the target: a slide along the wall, again extending past occupied
    // spots.
    let x_hit = g.value(raw[0]) != cv[0];
    let y_hit = g.value(raw[1]) != cv[1];
    let try_axis = |g: &mut Graph, wall_axis: usize| -> Option<[Var; 2]> {
        let wall = clamped[wall_axis];
        let wall_val = cv[wall_axis];
        let anchor = if wall_axis == 0 { pi[0] } else { pi[1] };
        let anchor_wall_val = if wall_axis == 0 { xi } else { yi };
        let free_anchor = if wall_axis == 0 { pi[1] } else { pi[0] };
        let free_anchor_val = if wall_axis == 0 { yi } else { xi };
        for k in 1..=others.len() + 1 {
            let reach = target * k as f64;
            let rem_val = (reach * reach - (wall_val - anchor_wall_val).powi(2)).max(0.0).sqrt();
            if rem_val < cfg.ds * 0.1 {
                continue;
            }
            for sgn in [1.0f64, -1.0] {
                let cand_free = free_anchor_val + sgn * rem_val;
                let cand = if wall_axis == 0 {
                    [wall_val, cand_free]
                } else {
                    [cand_free, wall_val]
                };
                if (0.0..=side).contains(&cand_free) && clear(cand) {
                    let gap = g.sub(wall, anchor);
                    let gap2 = g.square(gap);
                    let t2 = g.leaf(reach * reach);
                    let rem2 = g.sub(t2, gap2);
                    let rem2 = g.max_const(rem2, 1e-24);
                    let rem = g.sqrt(rem2);
                    let shifted = if sgn > 0.0 {
                        g.add(free_anchor, rem)
                    } else {
                        g.sub(free_anchor, rem)
                    };
                    return Some(if wall_axis == 0 {
                        [wall, shifted]
                    } else {
                        [shifted, wall]
                    });
                }
            }
        }
        None
    };
    if x_hit {
        if let Some(p) = try_axis(g, 0) {
            return p;
        }
    }
    if y_hit {
        if let Some(p) = try_axis(g, 1) {
            return p;
        }
    }
    clamped
}

/// Numeric layout clamp, same code path as the tape version.
pub fn clamp_layout(layout: &AntennaLayout, cfg: &ScenarioConfig) -> Result<AntennaLayout> {
    let mut g = Graph::new();
    let mut lv = LayoutVars::bind(&mut g, layout);
    clamp_layout_tape(&mut g, &mut lv, cfg)?;
    Ok(lv.snapshot(&g))
}

/// A violated constraint of the optimization problem.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Constraint {
    PowerBudget,
    UlPower(usize),
    DlRate(usize),
    UlRate(usize),
    SensingSinr,
    Region(AntennaGroup),
    Spacing(AntennaGroup),
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Constraint::PowerBudget => write!(f, "power_budget"),
            Constraint::UlPower(j) => write!(f, "ul_power[{j}]"),
            Constraint::DlRate(i) => write!(f, "dl_rate[{i}]"),
            Constraint::UlRate(j) => write!(f, "ul_rate[{j}]"),
            Constraint::SensingSinr => write!(f, "sensing_sinr"),
            Constraint::Region(g) => write!(f, "region[{}]", g.name()),
            Constraint::Spacing(g) => write!(f, "spacing[{}]", g.name()),
        }
    }
}

/// Check every slack of the full constraint set against [`FEAS_TOL`].
/// Geometry slacks are recomputed from the passed layout.
pub fn feasibility(
    report: &MetricsReport,
    layout: &AntennaLayout,
    cfg: &ScenarioConfig,
) -> (bool, Vec<Constraint>) {
    let mut violated = Vec::new();
    if report.slack_power_budget < -FEAS_TOL {
        violated.push(Constraint::PowerBudget);
    }
    for (j, &s) in report.slack_p_u.iter().enumerate() {
        if s < -FEAS_TOL {
            violated.push(Constraint::UlPower(j));
        }
    }
    for (i, &s) in report.slack_r_d.iter().enumerate() {
        if s < -FEAS_TOL {
            violated.push(Constraint::DlRate(i));
        }
    }
    for (j, &s) in report.slack_r_u.iter().enumerate() {
        if s < -FEAS_TOL {
            violated.push(Constraint::UlRate(j));
        }
    }
    if report.slack_lambda < -FEAS_TOL {
        violated.push(Constraint::SensingSinr);
    }
    let (spacing, region) = layout_slacks(layout, cfg);
    for (k, grp) in ANTENNA_GROUPS.iter().enumerate() {
        if region[k] < -FEAS_TOL {
            violated.push(Constraint::Region(*grp));
        }
        if spacing[k] < -FEAS_TOL {
            violated.push(Constraint::Spacing(*grp));
        }
    }
    (violated.is_empty(), violated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn report_with(
        cfg: &ScenarioConfig,
        r_d: Vec<f64>,
        r_u: Vec<f64>,
        lambda_t: f64,
        tx_power: f64,
        p_u: Vec<f64>,
        layout: &AntennaLayout,
    ) -> MetricsReport {
        let (slack_spacing, slack_region) = layout_slacks(layout, cfg);
        MetricsReport {
            slack_r_d: r_d.iter().map(|r| r - cfg.r_th_d).collect(),
            slack_r_u: r_u.iter().map(|r| r - cfg.r_th_u).collect(),
            slack_lambda: lambda_t - cfg.lambda_th_s,
            slack_power_budget: cfg.p_bs - tx_power,
            slack_p_u: p_u.iter().map(|p| cfg.p_u_max - p).collect(),
            slack_spacing,
            slack_region,
            r_d,
            r_u,
            sinr_linear: lambda_t.exp2(),
            lambda_t,
            tx_power,
        }
    }

    #[test]
    fn satisfied_state_loss_is_minus_lambda() {
        let cfg = ScenarioConfig::default();
        let layout = AntennaLayout::fpa_grid(&cfg).unwrap();
        let r = report_with(
            &cfg,
            vec![1.0, 1.2],
            vec![0.9, 1.1],
            5.0,
            cfg.p_bs / 2.0,
            vec![0.05, 0.04],
            &layout,
        );
        for mode in [PenaltyMode::PaperIndicator, PenaltyMode::SoftHinge] {
            let l = meta_loss(&r, &cfg, mode);
            assert_eq!(l.total, -5.0, "{mode}");
            assert_eq!(l.target_term, -5.0);
            assert_eq!(
                l.thd_term + l.thu_term + l.ths_term + l.up_term + l.ma_term,
                0.0
            );
        }
    }

    #[test]
    fn one_dl_violation_costs_one_zeta() {
        let cfg = ScenarioConfig::default();
        let layout = AntennaLayout::fpa_grid(&cfg).unwrap();
        let r = report_with(
            &cfg,
            vec![cfg.r_th_d / 2.0, 1.2],
            vec![0.9, 1.1],
            5.0,
            0.5,
            vec![0.05, 0.04],
            &layout,
        );
        let l = meta_loss(&r, &cfg, PenaltyMode::PaperIndicator);
        assert_eq!(l.thd_term, cfg.zeta_thd);
        let l = meta_loss(&r, &cfg, PenaltyMode::SoftHinge);
        assert!((l.thd_term - cfg.zeta_thd * 0.5).abs() < 1e-12);
    }

    #[test]
    fn indicator_mode_piecewise_constant() {
        let cfg = ScenarioConfig::default();
        let layout = AntennaLayout::fpa_grid(&cfg).unwrap();
        // Two states on the same side of every threshold only differ in the
        // target term.
        let a = report_with(
            &cfg,
            vec![0.1, 0.2],
            vec![0.9, 1.1],
            5.0,
            0.5,
            vec![0.05, 0.2],
            &layout,
        );
        let b = report_with(
            &cfg,
            vec![0.2, 0.3],
            vec![0.8, 0.9],
            7.0,
            0.4,
            vec![0.03, 0.15],
            &layout,
        );
        let la = meta_loss(&a, &cfg, PenaltyMode::PaperIndicator);
        let lb = meta_loss(&b, &cfg, PenaltyMode::PaperIndicator);
        assert_eq!(la.total - la.target_term, lb.total - lb.target_term);
        assert_eq!(la.thd_term, 2.0 * cfg.zeta_thd);
        assert_eq!(la.up_term, cfg.zeta_2);
    }

    #[test]
    fn soft_hinge_zero_on_feasible_side_and_continuous() {
        assert_eq!(hinge_normalized(1.0, 1.0), 0.0);
        assert_eq!(hinge_normalized(1.0, 2.0), 0.0);
        assert!((hinge_normalized(2.0, 1.0) - 0.5).abs() < 1e-15);
        let eps = 1e-9;
        assert!(hinge_normalized(1.0, 1.0 - eps) < 2.0 * eps);
    }

    #[test]
    fn projection_cases_and_idempotence() {
        let p_bs = 2.0;
        let p = vec![vec![Complex64::new(0.6, 0.8), Complex64::new(0.0, 0.0)]];
        // Trace 1.0 <= 2.0: unchanged.
        assert_eq!(project_transmit_power(&p, p_bs), p);

        // Trace 4 * p_bs: every entry halved.
        let e = (4.0 * p_bs / 2.0).sqrt();
        let big = vec![vec![Complex64::new(e, 0.0), Complex64::new(0.0, e)]];
        let proj = project_transmit_power(&big, p_bs);
        assert!((proj[0][0] - big[0][0] / 2.0).norm() < 1e-12);
        assert!((proj[0][1] - big[0][1] / 2.0).norm() < 1e-12);

        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p: Vec<Vec<Complex64>> = (0..2)
                .map(|_| {
                    (0..3)
                        .map(|_| {
                            Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))
                        })
                        .collect()
                })
                .collect();
            let once = project_transmit_power(&p, p_bs);
            let twice = project_transmit_power(&once, p_bs);
            // Bit-exact idempotence.
            for (a, b) in once.iter().flatten().zip(twice.iter().flatten()) {
                assert_eq!(a.re.to_bits(), b.re.to_bits());
                assert_eq!(a.im.to_bits(), b.im.to_bits());
            }
            // Exact budget compliance.
            let tr: f64 = once.iter().flatten().map(|z| z.norm_sqr()).sum();
            assert!(tr <= p_bs);
            // Moduli never increase, phases preserved.
            for (a, b) in p.iter().flatten().zip(once.iter().flatten()) {
                assert!(b.norm() <= a.norm() + 1e-15);
                if a.norm() > 1e-12 {
                    let pa = a.im.atan2(a.re);
                    let pb = b.im.atan2(b.re);
                    assert!((pa - pb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tape_projection_matches_numeric() {
        let p_bs = 0.7;
        let p = vec![
            vec![Complex64::new(1.3, -0.2), Complex64::new(0.1, 0.9)],
            vec![Complex64::new(-0.4, 0.5), Complex64::new(0.8, 0.3)],
        ];
        let want = project_transmit_power(&p, p_bs);
        let mut g = Graph::new();
        let mut pv: Vec<Vec<CVar>> = p
            .iter()
            .map(|col| col.iter().map(|&z| g.cleaf(z)).collect())
            .collect();
        project_transmit_power_tape(&mut g, &mut pv, p_bs);
        for (col_w, col_t) in want.iter().zip(&pv) {
            for (&w, &t) in col_w.iter().zip(col_t) {
                assert!((g.cvalue(t) - w).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn normalization_cases() {
        let z = vec![vec![Complex64::new(3.0, 4.0)]];
        let v = vec![Complex64::new(0.0, 0.0), Complex64::new(0.0, -2.0)];
        let (zn, vn) = normalize_receive_beams(&z, &v);
        assert!((zn[0][0] - Complex64::new(0.6, 0.8)).norm() < 1e-15);
        assert_eq!(vn[0], Complex64::new(1.0, 0.0));
        assert!((vn[1] - Complex64::new(0.0, -1.0)).norm() < 1e-15);
        // Unit-modulus input is a fixed point.
        let (zn2, vn2) = normalize_receive_beams(&zn, &vn);
        for (a, b) in zn.iter().flatten().zip(zn2.iter().flatten()) {
            assert!((a - b).norm() < 1e-15);
        }
        for (a, b) in vn.iter().zip(&vn2) {
            assert!((a - b).norm() < 1e-15);
        }
        // All moduli within 1e-12 of one.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let v: Vec<Complex64> = (0..64)
            .map(|_| Complex64::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect();
        let (_, vn) = normalize_receive_beams(&[], &v);
        for z in vn {
            assert!((z.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_normalization_matches_numeric() {
        let v = vec![
            Complex64::new(2.0, -1.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(-0.3, 0.4),
        ];
        let (_, want) = normalize_receive_beams(&[], &v);
        let mut g = Graph::new();
        let mut vv: Vec<CVar> = v.iter().map(|&z| g.cleaf(z)).collect();
        normalize_unit_modulus_tape(&mut g, &mut vv);
        for (&t, w) in vv.iter().zip(want) {
            assert!((g.cvalue(t) - w).norm() < 1e-15);
        }
    }

    #[test]
    fn clamp_cases() {
        let cfg = ScenarioConfig::default();
        let feasible = AntennaLayout::fpa_grid(&cfg).unwrap();
        let out = clamp_layout(&feasible, &cfg).unwrap();
        assert_eq!(out, feasible);

        // Out-of-box coordinate gets clamped to the boundary.
        let mut layout = feasible.clone();
        layout.t_bs[0] = [-0.3, 2.5];
        let out = clamp_layout(&layout, &cfg).unwrap();
        assert!(out.t_bs[0][0] >= 0.0 && out.t_bs[0][1] <= cfg.region_side);

        // Coincident pair gets separated to at least ds.
        let mut layout = feasible.clone();
        layout.r_bs_s[1] = layout.r_bs_s[0];
        let out = clamp_layout(&layout, &cfg).unwrap();
        let d = {
            let a = out.r_bs_s[0];
            let b = out.r_bs_s[1];
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        };
        assert!(d >= cfg.ds - 1e-12);
        for p in &out.r_bs_s {
            assert!(p[0] >= 0.0 && p[0] <= cfg.region_side);
            assert!(p[1] >= 0.0 && p[1] <= cfg.region_side);
        }
    }

    #[test]
    fn clamp_random_layouts_end_feasible() {
        let cfg = ScenarioConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..50 {
            let mut layout = AntennaLayout::fpa_grid(&cfg).unwrap();
            for grp in layout
                .t_bs
                .iter_mut()
                .chain(layout.r_bs_c.iter_mut())
                .chain(layout.r_bs_s.iter_mut())
            {
                grp[0] = rng.gen_range(-1.0..3.0);
                grp[1] = rng.gen_range(-1.0..3.0);
            }
            let out = clamp_layout(&layout, &cfg).unwrap();
            let (spacing, region) = layout_slacks(&out, &cfg);
            for k in 0..3 {
                assert!(spacing[k] >= -1e-12, "spacing slack {}", spacing[k]);
                assert!(region[k] >= -1e-12, "region slack {}", region[k]);
            }
        }
    }

    #[test]
    fn infeasible_region_errors() {
        // Antennas cannot fit spacing 0.5 in a region of side 0.2; bypass
        // config validation and call the clamp directly.
        let cfg = ScenarioConfig {
            region_side: 0.2,
            ..ScenarioConfig::default()
        };
        let layout = AntennaLayout {
            t_bs: vec![[0.1, 0.1]; 4],
            r_bs_c: vec![[0.1, 0.1]; 4],
            r_bs_s: vec![[0.1, 0.1]; 4],
        };
        assert!(matches!(
            clamp_layout(&layout, &cfg),
            Err(Error::InfeasibleLayout(_))
        ));
    }

    #[test]
    fn feasibility_lists_violations() {
        let cfg = ScenarioConfig::default();
        let layout = AntennaLayout::fpa_grid(&cfg).unwrap();
        // Zero-power state: rates and sinr all below their thresholds.
        let r = report_with(
            &cfg,
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            f64::NEG_INFINITY,
            0.0,
            vec![0.0, 0.0],
            &layout,
        );
        let (ok, violated) = feasibility(&r, &layout, &cfg);
        assert!(!ok);
        assert!(violated.contains(&Constraint::DlRate(0)));
        assert!(violated.contains(&Constraint::UlRate(1)));
        assert!(violated.contains(&Constraint::SensingSinr));
        assert!(!violated.contains(&Constraint::PowerBudget));

        // Slack at -1e-10 is within tolerance.
        let mut r2 = report_with(
            &cfg,
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            5.0,
            0.5,
            vec![0.05, 0.05],
            &layout,
        );
        r2.slack_lambda = -1e-10;
        let (ok, violated) = feasibility(&r2, &layout, &cfg);
        assert!(ok, "{violated:?}");
    }

    #[test]
    fn tape_meta_loss_matches_numeric() {
        use crate::channel::sample_paths;
        use crate::metrics::{full_report, metrics_tape, BeamformingState, SiForm, StateVars};
        let cfg = ScenarioConfig {
            n_t: 2,
            n_rc: 2,
            n_rs: 2,
            d: 1,
            u: 1,
            c: 1,
            l_t: 2,
            l_r: 2,
            ..ScenarioConfig::default()
        };
        let real = sample_paths(&cfg, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let state = BeamformingState {
            p: vec![(0..cfg.n_t)
                .map(|_| Complex64::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
                .collect()],
            p_u: vec![0.08],
            z: vec![vec![Complex64::new(1.0, 0.0); cfg.n_rc]],
            v: vec![Complex64::new(1.0, 0.0); cfg.n_rs],
            layout: AntennaLayout::fpa_grid(&cfg).unwrap(),
        };
        let ch = crate::channel::channels_at(&cfg, &state.layout, &real).unwrap();
        let report = full_report(&ch, &state, &cfg).unwrap();
        for mode in [PenaltyMode::SoftHinge, PenaltyMode::PaperIndicator] {
            let want = meta_loss(&report, &cfg, mode).total;
            let mut g = Graph::new();
            let chv = ch.bind(&mut g);
            let st = StateVars::bind(&mut g, &state);
            let m = metrics_tape(&mut g, &chv, &st, &cfg, SiForm::Quadratic).unwrap();
            let total = meta_loss_tape(&mut g, &m, &st.layout, &cfg, mode);
            assert!(
                (g.value(total) - want).abs() < 1e-9,
                "{mode}: tape {} vs numeric {want}",
                g.value(total)
            );
        }
    }
}
