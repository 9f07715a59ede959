//! Comparison schemes: a classical penalized multi-start solver and the
//! fixed-antenna variants. All of them evaluate states through the same
//! metrics and constraints code as the meta-learning path.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::{AntennaLayout, Realization};
use crate::config::{GmlConfig, ScenarioConfig, Scheme, SolverSpec};
use crate::constraints::{
    clamp_layout, feasibility, normalize_receive_beams, project_transmit_power,
};
use crate::diffcore::Graph;
use crate::error::{Error, Result};
use crate::gml::{self, FrozenGroups, IsacProblem, Solution};
use crate::metrics::{full_report_with, metrics_tape, BeamformingState, SiForm, StateVars};

/// One benchmark scheme and its solver options.
#[derive(Clone, Debug)]
pub struct BaselineSpec {
    pub kind: Scheme,
    pub solver: SolverSpec,
}

/// Penalized objective value and per-block ascent gradients of one state.
struct PenalizedEval {
    score: f64,
    grads: Vec<Vec<f64>>,
}

/// `Lambda_t` minus `w` times the squared QoS violations, on the tape, with
/// gradients for every block in the `(p_u, p, layout, z, v)` flattening.
fn eval_penalized(
    g: &mut Graph,
    cfg: &ScenarioConfig,
    real: &Realization,
    state: &BeamformingState,
    weight: f64,
    si_form: SiForm,
) -> Result<PenalizedEval> {
    g.clear();
    let st = StateVars::bind(g, state);
    let ch = crate::channel::rebuild_channels(g, cfg, &st.layout, real)?;
    let m = metrics_tape(g, &ch, &st, cfg, si_form)?;

    let lambda = if g.value(m.sinr) == 0.0 {
        g.leaf(crate::metrics::LAMBDA_ZERO_SENTINEL)
    } else {
        m.lambda
    };
    let mut score = lambda;
    let mut quad = |g: &mut Graph, threshold: f64, value: crate::diffcore::Var, s: crate::diffcore::Var| {
        let t = g.leaf(threshold);
        let gap = g.sub(t, value);
        let pos = g.max_const(gap, 0.0);
        let sq = g.square(pos);
        let wsq = g.scale(sq, weight);
        g.sub(s, wsq)
    };
    for &r in &m.r_d {
        score = quad(g, cfg.r_th_d, r, score);
    }
    for &r in &m.r_u {
        score = quad(g, cfg.r_th_u, r, score);
    }
    score = quad(g, cfg.lambda_th_s, lambda, score);
    g.check_fault().map_err(|e| e.with_context("nlp"))?;

    let adj = g.backward_numeric(score);
    let read = |vars: &[crate::diffcore::Var]| -> Vec<f64> {
        vars.iter().map(|v| adj[v.index()]).collect()
    };
    let read_c = |cols: &[Vec<crate::diffcore::CVar>]| -> Vec<f64> {
        cols.iter()
            .flat_map(|col| col.iter().flat_map(|z| [adj[z.re.index()], adj[z.im.index()]]))
            .collect()
    };
    let grads = vec![
        read(&st.p_u),
        read_c(&st.p),
        read(&st.layout.flatten()),
        read_c(&st.z),
        st.v
            .iter()
            .flat_map(|z| [adj[z.re.index()], adj[z.im.index()]])
            .collect(),
    ];
    Ok(PenalizedEval {
        score: g.value(score),
        grads,
    })
}

fn apply_projections(cfg: &ScenarioConfig, state: &mut BeamformingState) -> Result<()> {
    state.p = project_transmit_power(&state.p, cfg.p_bs);
    let (z, v) = normalize_receive_beams(&state.z, &state.v);
    state.z = z;
    state.v = v;
    for p in state.p_u.iter_mut() {
        *p = p.clamp(0.0, cfg.p_u_max);
    }
    state.layout = clamp_layout(&state.layout, cfg)?;
    Ok(())
}

fn random_start(
    cfg: &ScenarioConfig,
    rng: &mut ChaCha12Rng,
) -> Result<BeamformingState> {
    let per_entry = cfg.p_bs / (cfg.n_t * cfg.d) as f64;
    let p: Vec<Vec<Complex64>> = (0..cfg.d)
        .map(|_| {
            (0..cfg.n_t)
                .map(|_| {
                    let re: f64 = StandardNormal.sample(rng);
                    let im: f64 = StandardNormal.sample(rng);
                    Complex64::new(re, im) * (per_entry / 2.0).sqrt()
                })
                .collect()
        })
        .collect();
    let phase = |rng: &mut ChaCha12Rng| {
        let t = rng.gen_range(0.0..std::f64::consts::TAU);
        Complex64::new(t.cos(), t.sin())
    };
    let z = (0..cfg.u)
        .map(|_| (0..cfg.n_rc).map(|_| phase(rng)).collect())
        .collect();
    let v = (0..cfg.n_rs).map(|_| phase(rng)).collect();
    let mut layout = AntennaLayout::fpa_grid(cfg)?;
    for grp in layout
        .t_bs
        .iter_mut()
        .chain(layout.r_bs_c.iter_mut())
        .chain(layout.r_bs_s.iter_mut())
    {
        grp[0] += rng.gen_range(-0.25..0.25);
        grp[1] += rng.gen_range(-0.25..0.25);
    }
    let mut state = BeamformingState {
        p: project_transmit_power(&p, cfg.p_bs),
        p_u: (0..cfg.u).map(|_| rng.gen_range(0.0..cfg.p_u_max)).collect(),
        z,
        v,
        layout,
    };
    apply_projections(cfg, &mut state)?;
    Ok(state)
}

/// Classical-solver stand-in: multi-start penalized projected-gradient
/// ascent on `Lambda_t` with quadratic QoS penalties on a geometric weight
/// schedule, projecting every block each step. Deterministic in `seed`;
/// restarts tie-break toward the lowest index.
pub fn solve_nlp(
    cfg: &ScenarioConfig,
    real: &Realization,
    spec: &SolverSpec,
    seed: u64,
) -> Result<Solution> {
    cfg.validate()?;
    spec.validate()?;
    let mut g = Graph::new();
    let mut best: Option<(bool, f64, BeamformingState)> = None;

    for restart in 0..spec.restarts {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(restart as u64 + 1)));
        let mut state = random_start(cfg, &mut rng)?;
        let mut eval = eval_penalized(&mut g, cfg, real, &state, spec.penalty_weight, SiForm::Quadratic)?;

        for stage in 0..spec.stages {
            let weight = spec.penalty_weight * spec.penalty_growth.powi(stage as i32);
            if stage > 0 {
                eval = eval_penalized(&mut g, cfg, real, &state, weight, SiForm::Quadratic)?;
            }
            let mut eta = spec.step_size;
            for _step in 0..spec.steps_per_stage {
                let mut accepted = false;
                for _try in 0..5 {
                    let mut flat = IsacProblem::state_to_blocks(&state);
                    for (b, grad) in eval.grads.iter().enumerate() {
                        for (x, d) in flat[b].iter_mut().zip(grad) {
                            *x += eta * d;
                        }
                    }
                    let mut cand = IsacProblem::blocks_to_state(cfg, &flat)?;
                    apply_projections(cfg, &mut cand)?;
                    let cand_eval =
                        eval_penalized(&mut g, cfg, real, &cand, weight, SiForm::Quadratic)?;
                    if cand_eval.score >= eval.score - 1e-12 {
                        state = cand;
                        eval = cand_eval;
                        eta = (eta * 1.05).min(spec.step_size * 10.0);
                        accepted = true;
                        break;
                    }
                    eta *= 0.5;
                }
                if !accepted {
                    // Even the smallest step hurts; this stage has stalled.
                    break;
                }
            }
        }

        let ch = crate::channel::channels_at(cfg, &state.layout, real)?;
        let report = full_report_with(&ch, &state, cfg, SiForm::Quadratic)?;
        let (feasible, _) = feasibility(&report, &state.layout, cfg);
        let score = if feasible { report.lambda_t } else { eval.score };
        let replace = match &best {
            None => true,
            Some((best_feasible, best_score, _)) => match (feasible, best_feasible) {
                (true, false) => true,
                (false, true) => false,
                _ => score > *best_score,
            },
        };
        if replace {
            best = Some((feasible, score, state));
        }
    }

    let (feasible, _, state) = best.ok_or_else(|| Error::Sweep("no restart produced a state".into()))?;
    let ch = crate::channel::channels_at(cfg, &state.layout, real)?;
    let report = full_report_with(&ch, &state, cfg, SiForm::Quadratic)?;
    Ok(Solution {
        scheme: Scheme::Nlp,
        seed,
        lambda_t: report.lambda_t,
        feasible,
        state,
        report,
    })
}

/// The fixed-antenna comparison schemes: the meta-learning optimizer with
/// the relevant layout groups frozen at the reference grid.
pub fn solve_fpa_variants(
    cfg: &ScenarioConfig,
    real: &Realization,
    gml_cfg: &GmlConfig,
    seed: u64,
    kind: Scheme,
) -> Result<Solution> {
    let frozen = match kind {
        Scheme::MaFdOnly => FrozenGroups::rx_s_only(),
        Scheme::FpaBoth => FrozenGroups::all(),
        other => {
            return Err(Error::Config(format!(
                "solve_fpa_variants expects a fixed-antenna scheme, got {}",
                other.id()
            )))
        }
    };
    let (solution, _) = gml::run(cfg, real, gml_cfg, seed, frozen, SiForm::Quadratic)?;
    Ok(solution)
}

/// Solve one realization with the given scheme.
pub fn solve_scheme(
    scheme: Scheme,
    cfg: &ScenarioConfig,
    real: &Realization,
    gml_cfg: &GmlConfig,
    solver: &SolverSpec,
    seed: u64,
) -> Result<Solution> {
    match scheme {
        Scheme::Ma => {
            let (solution, _) =
                gml::run(cfg, real, gml_cfg, seed, FrozenGroups::default(), SiForm::Quadratic)?;
            Ok(solution)
        }
        Scheme::Nlp => solve_nlp(cfg, real, solver, seed),
        Scheme::MaFdOnly | Scheme::FpaBoth => {
            solve_fpa_variants(cfg, real, gml_cfg, seed, scheme)
        }
    }
}
