//! Gradient-based meta-learning optimizer.
//!
//! Five small learner networks — one per variable block — map the objective
//! gradient of their block to an additive update. Inner iterations apply
//! the updates cyclically; outer iterations restart from a shared
//! initialization and evaluate the meta-loss of the trajectory's endpoint;
//! each epoch backpropagates the mean meta-loss through the full update
//! trajectories (gradients included, via the graph-emitting backward sweep)
//! and takes one Adam step on all learner weights. No pre-training: the
//! networks adapt online, per scenario.

use std::cell::RefCell;
use std::time::Instant;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::channel::{AntennaLayout, LayoutVars, Realization};
use crate::config::{GmlConfig, PenaltyMode, ScenarioConfig, Scheme};
use crate::constraints::{
    clamp_layout_tape, feasibility, meta_loss_tape, normalize_unit_modulus_tape,
    project_transmit_power, project_transmit_power_tape,
};
use crate::diffcore::{CVar, Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{full_report_with, metrics_tape, BeamformingState, MetricsReport, SiForm, StateVars};

const LEAKY_SLOPE: f64 = 0.01;

/// An optimization problem the meta-learner can drive: named variable
/// blocks, a tape meta-loss, per-block projections, and a numeric candidate
/// evaluation.
pub trait MetaProblem {
    /// Block names and real dimensions, in update order.
    fn block_specs(&self) -> Vec<BlockSpec>;

    /// Shared initial values (the same point is restored at the start of
    /// every outer iteration).
    fn initial_state(&self, rng: &mut ChaCha12Rng) -> Result<Vec<Vec<f64>>>;

    /// The minimized meta-loss at `state`, on the tape. The inner objective
    /// fed to the learners is its negation.
    fn meta_loss(&self, g: &mut Graph, state: &[Vec<Var>]) -> Result<Var>;

    /// Projection applied to block `b` right after its update within a
    /// cycle.
    fn project_step(&self, g: &mut Graph, block: usize, vars: &mut Vec<Var>) -> Result<()>;

    /// Projection applied once per outer iteration, after all inner cycles.
    fn project_outer(&self, g: &mut Graph, state: &mut [Vec<Var>]) -> Result<()>;

    /// Coordinates of block `b` that must not move (true = frozen).
    fn frozen_mask(&self, _block: usize) -> Option<Vec<bool>> {
        None
    }

    /// Called before block `b`'s gradient evaluation. Problems that cache
    /// tape fragments must drop any fragment that depends on `b`: the
    /// windowed backward sweep only sees operations recorded after the
    /// evaluation starts, so a cached fragment would silently cut the
    /// gradient path through it.
    fn begin_block_eval(&self, _block: usize) {}

    /// Numeric objective value and feasibility of a candidate state.
    fn evaluate_candidate(&self, state: &[Vec<f64>]) -> Result<CandidateEval>;
}

#[derive(Clone, Debug)]
pub struct BlockSpec {
    pub name: &'static str,
    /// Learner network id associated with the block.
    pub network_id: &'static str,
    /// Real coordinate count (complex entries count twice).
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CandidateEval {
    pub objective: f64,
    pub feasible: bool,
}

/// One learner: two dense layers with a leaky rectifier between, no output
/// activation, and a scale on the emitted delta. Input and output widths
/// equal the real dimension of the associated block.
#[derive(Clone, Debug)]
pub struct LearnerNetwork {
    pub network_id: String,
    pub io: usize,
    pub hidden: usize,
    pub step_scale: f64,
    /// `hidden x io`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `io x hidden`, row-major. Zero-initialized, so an untrained learner
    /// emits zero deltas and epoch 0 reproduces the projected
    /// initialization.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl LearnerNetwork {
    pub fn new(
        network_id: &str,
        io: usize,
        hidden: usize,
        step_scale: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let scale = (2.0 / io as f64).sqrt();
        let w1 = (0..hidden * io)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                x * scale
            })
            .collect();
        LearnerNetwork {
            network_id: network_id.to_string(),
            io,
            hidden,
            step_scale,
            w1,
            b1: vec![0.0; hidden],
            w2: vec![0.0; io * hidden],
            b2: vec![0.0; io],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(&self.w1);
        out.extend(&self.b1);
        out.extend(&self.w2);
        out.extend(&self.b2);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let (a, b) = (self.w1.len(), self.b1.len());
        let c = self.w2.len();
        self.w1.copy_from_slice(&flat[..a]);
        self.b1.copy_from_slice(&flat[a..a + b]);
        self.w2.copy_from_slice(&flat[a + b..a + b + c]);
        self.b2.copy_from_slice(&flat[a + b + c..]);
    }
}

/// Tape-bound learner weights.
pub struct LearnerVars {
    pub io: usize,
    pub hidden: usize,
    pub step_scale: f64,
    pub w1: Vec<Var>,
    pub b1: Vec<Var>,
    pub w2: Vec<Var>,
    pub b2: Vec<Var>,
}

impl LearnerVars {
    pub fn bind(g: &mut Graph, net: &LearnerNetwork) -> LearnerVars {
        LearnerVars {
            io: net.io,
            hidden: net.hidden,
            step_scale: net.step_scale,
            w1: g.leaves(&net.w1),
            b1: g.leaves(&net.b1),
            w2: g.leaves(&net.w2),
            b2: g.leaves(&net.b2),
        }
    }

    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(
            self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len(),
        );
        out.extend(&self.w1);
        out.extend(&self.b1);
        out.extend(&self.w2);
        out.extend(&self.b2);
        out
    }
}

/// Map a gradient vector through a learner: `delta = step_scale * (W2 *
/// leaky(W1 * grad + b1) + b2)`. Differentiable in both the gradient and
/// the weights.
pub fn learner_forward(g: &mut Graph, net: &LearnerVars, grad: &[Var]) -> Result<Vec<Var>> {
    if grad.len() != net.io {
        return Err(Error::Shape(format!(
            "learner expects input width {}, got {}",
            net.io,
            grad.len()
        )));
    }
    let mut hidden_out = Vec::with_capacity(net.hidden);
    for h in 0..net.hidden {
        let row = &net.w1[h * net.io..(h + 1) * net.io];
        let mut acc = net.b1[h];
        for (w, x) in row.iter().zip(grad) {
            let p = g.mul(*w, *x);
            acc = g.add(acc, p);
        }
        hidden_out.push(g.leaky_relu(acc, LEAKY_SLOPE));
    }
    let mut out = Vec::with_capacity(net.io);
    for o in 0..net.io {
        let row = &net.w2[o * net.hidden..(o + 1) * net.hidden];
        let mut acc = net.b2[o];
        for (w, x) in row.iter().zip(&hidden_out) {
            let p = g.mul(*w, *x);
            acc = g.add(acc, p);
        }
        out.push(g.scale(acc, net.step_scale));
    }
    Ok(out)
}

/// Adam moments for one parameter vector (beta1 = 0.9, beta2 = 0.999,
/// eps = 1e-8), minimizing.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

/// Per-epoch progress. `best_objective` is a running max over feasible
/// candidates (negative infinity until the first feasible one).
#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_meta_loss: f64,
    pub best_objective: f64,
    pub feasible: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct OptimizationTrace {
    pub epochs: Vec<EpochRecord>,
}

impl OptimizationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_meta_loss,best_objective,feasible,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{},{:.3}\n",
                r.epoch,
                r.mean_meta_loss,
                r.best_objective,
                u8::from(r.feasible),
                r.seconds
            ));
        }
        out
    }
}

/// Result of a meta-optimization run on a generic problem.
#[derive(Clone, Debug)]
pub struct MetaOutcome {
    pub best_state: Vec<Vec<f64>>,
    pub best_objective: f64,
    pub feasible: bool,
    pub trace: OptimizationTrace,
}

/// Running best-candidate tracker: the feasible candidate with the
/// largest `-loss` (strict replacement), plus an any-feasibility fallback.
pub struct BestTracker {
    feasible: Option<(f64, Vec<Vec<f64>>, f64)>, // (neg_loss, state, objective)
    any: Option<(f64, Vec<Vec<f64>>, f64)>,
}

impl BestTracker {
    pub fn new() -> Self {
        BestTracker {
            feasible: None,
            any: None,
        }
    }

    fn offer(&mut self, neg_loss: f64, eval: &CandidateEval, state: &[Vec<f64>]) {
        let better = |slot: &Option<(f64, Vec<Vec<f64>>, f64)>| match slot {
            Some((best, _, _)) => neg_loss > *best,
            None => true,
        };
        if better(&self.any) {
            self.any = Some((neg_loss, state.to_vec(), eval.objective));
        }
        if eval.feasible && better(&self.feasible) {
            self.feasible = Some((neg_loss, state.to_vec(), eval.objective));
        }
    }
}

/// One cyclic pass over all variable blocks: per block, differentiate the
/// current objective with respect to that block (others held at their
/// current estimates), map the gradient through the block's learner, add
/// the delta, and apply the block's per-step projection.
pub fn inner_cycle<P: MetaProblem>(
    problem: &P,
    g: &mut Graph,
    nets: &[LearnerVars],
    state: &mut [Vec<Var>],
) -> Result<()> {
    let specs = problem.block_specs();
    for b in 0..state.len() {
        problem.begin_block_eval(b);
        let mark = g.mark();
        let loss = problem
            .meta_loss(g, state)
            .map_err(|e| e.with_context(specs[b].name))?;
        let objective = g.neg(loss);
        g.check_fault()
            .map_err(|e| e.with_context(specs[b].name))?;
        let grads = g.backward_graph(objective, mark, &state[b]);
        let delta = learner_forward(g, &nets[b], &grads)?;
        g.check_fault()
            .map_err(|e| e.with_context(specs[b].name))?;
        let frozen = problem.frozen_mask(b);
        for (k, dv) in delta.into_iter().enumerate() {
            let is_frozen = frozen.as_ref().map_or(false, |m| m[k]);
            if !is_frozen {
                state[b][k] = g.add(state[b][k], dv);
            }
        }
        problem.project_step(g, b, &mut state[b])?;
    }
    Ok(())
}

/// One outer iteration: restart from the shared initialization, run `n_i`
/// inner cycles, apply the outer projection, and evaluate the meta-loss.
/// Everything stays on the tape for the epoch-level backward sweep.
pub fn outer_iteration<P: MetaProblem>(
    problem: &P,
    g: &mut Graph,
    nets: &[LearnerVars],
    init_vars: &[Vec<Var>],
    n_i: usize,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let mut state: Vec<Vec<Var>> = init_vars.to_vec();
    for _ in 0..n_i {
        inner_cycle(problem, g, nets, &mut state)?;
    }
    problem.project_outer(g, &mut state)?;
    let loss = problem.meta_loss(g, &state)?;
    g.check_fault()?;
    Ok((loss, state))
}

/// Forward pass of one epoch: `n_o` outer iterations, candidate tracking,
/// and the mean meta-loss node. Exposed separately so tests can finite-
/// difference the epoch loss with respect to learner weights.
pub fn epoch_forward<P: MetaProblem>(
    problem: &P,
    g: &mut Graph,
    nets: &[LearnerVars],
    init_vars: &[Vec<Var>],
    cfg: &GmlConfig,
    tracker: &mut BestTracker,
) -> Result<Var> {
    let mut loss_sum = g.leaf(0.0);
    for _ in 0..cfg.n_o {
        let (loss, state) = outer_iteration(problem, g, nets, init_vars, cfg.n_i)?;
        loss_sum = g.add(loss_sum, loss);
        let values: Vec<Vec<f64>> = state.iter().map(|b| g.values(b)).collect();
        let eval = problem.evaluate_candidate(&values)?;
        tracker.offer(-g.value(loss), &eval, &values);
    }
    Ok(g.scale(loss_sum, 1.0 / cfg.n_o as f64))
}

/// Run the full meta-optimization: `n_e` epochs of forward trajectories,
/// epoch-level backpropagation, and Adam updates of every learner.
/// Deterministic in `(problem, cfg, seed)`.
pub fn run_meta<P: MetaProblem>(problem: &P, cfg: &GmlConfig, seed: u64) -> Result<MetaOutcome> {
    cfg.validate()?;
    let specs = problem.block_specs();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let init = problem.initial_state(&mut rng)?;
    if init.len() != specs.len() || init.iter().zip(&specs).any(|(v, s)| v.len() != s.len) {
        return Err(Error::Shape("initial state does not match block specs".into()));
    }
    let mut nets: Vec<LearnerNetwork> = specs
        .iter()
        .map(|s| LearnerNetwork::new(s.network_id, s.len, cfg.hidden, cfg.step_scale, &mut rng))
        .collect();
    let mut adams: Vec<AdamState> = nets.iter().map(|n| AdamState::new(n.param_count())).collect();

    let mut g = Graph::new();
    let mut tracker = BestTracker::new();
    let mut trace = OptimizationTrace::default();

    for epoch in 0..cfg.n_e {
        let t0 = Instant::now();
        g.clear();
        let net_vars: Vec<LearnerVars> = nets.iter().map(|n| LearnerVars::bind(&mut g, n)).collect();
        let init_vars: Vec<Vec<Var>> = init.iter().map(|b| g.leaves(b)).collect();

        let mean_loss = epoch_forward(problem, &mut g, &net_vars, &init_vars, cfg, &mut tracker)?;
        g.check_fault()?;

        let adj = g.backward_numeric(mean_loss);
        for (net, (vars, adam)) in nets.iter_mut().zip(net_vars.iter().zip(adams.iter_mut())) {
            let grads: Vec<f64> = vars.all_vars().iter().map(|v| adj[v.index()]).collect();
            let mut params = net.params();
            adam.step(&mut params, &grads, cfg.meta_lr);
            net.set_params(&params);
        }

        let (best_objective, feasible) = match &tracker.feasible {
            Some((_, _, obj)) => (*obj, true),
            None => (f64::NEG_INFINITY, false),
        };
        trace.epochs.push(EpochRecord {
            epoch,
            mean_meta_loss: g.value(mean_loss),
            best_objective,
            feasible,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }

    let (best_state, best_objective, feasible) = match (tracker.feasible, tracker.any) {
        (Some((_, state, obj)), _) => (state, obj, true),
        (None, Some((_, state, obj))) => (state, obj, false),
        (None, None) => return Err(Error::Sweep("no candidate produced".into())),
    };
    Ok(MetaOutcome {
        best_state,
        best_objective,
        feasible,
        trace,
    })
}

// ---------------------------------------------------------------------------
// The concrete full-duplex ISAC problem.
// ---------------------------------------------------------------------------

/// Which antenna groups are locked to the reference grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FrozenGroups {
    pub tx: bool,
    pub rx_c: bool,
    pub rx_s: bool,
}

impl FrozenGroups {
    pub fn all() -> Self {
        FrozenGroups {
            tx: true,
            rx_c: true,
            rx_s: true,
        }
    }

    pub fn rx_s_only() -> Self {
        FrozenGroups {
            tx: false,
            rx_c: false,
            rx_s: true,
        }
    }
}

struct ChannelCache {
    generation: u64,
    layout_ids: Vec<Var>,
    channels: Option<crate::channel::ChannelVars>,
}

/// The echo-SINR maximization problem over `(P_u, P, L, Z, V)`.
pub struct IsacProblem {
    pub cfg: ScenarioConfig,
    pub real: Realization,
    pub mode: PenaltyMode,
    pub si_form: SiForm,
    pub frozen: FrozenGroups,
    cache: RefCell<ChannelCache>,
}

const BLOCK_P_U: usize = 0;
const BLOCK_P: usize = 1;
const BLOCK_L: usize = 2;
const BLOCK_Z: usize = 3;
const BLOCK_V: usize = 4;

impl IsacProblem {
    pub fn new(
        cfg: ScenarioConfig,
        real: Realization,
        mode: PenaltyMode,
        si_form: SiForm,
        frozen: FrozenGroups,
    ) -> Self {
        IsacProblem {
            cfg,
            real,
            mode,
            si_form,
            frozen,
            cache: RefCell::new(ChannelCache {
                generation: u64::MAX,
                layout_ids: Vec::new(),
                channels: None,
            }),
        }
    }

    /// Flatten a beamforming state into the block layout used by the
    /// optimizer (order `p_u, p, layout, z, v`; complex interleaved).
    pub fn state_to_blocks(state: &BeamformingState) -> Vec<Vec<f64>> {
        let flatten_c = |cols: &[Vec<Complex64>]| {
            cols.iter()
                .flat_map(|col| col.iter().flat_map(|z| [z.re, z.im]))
                .collect::<Vec<f64>>()
        };
        vec![
            state.p_u.clone(),
            flatten_c(&state.p),
            state.layout.flatten(),
            flatten_c(&state.z),
            state.v.iter().flat_map(|z| [z.re, z.im]).collect(),
        ]
    }

    pub fn blocks_to_state(cfg: &ScenarioConfig, blocks: &[Vec<f64>]) -> Result<BeamformingState> {
        let unflatten_c = |flat: &[f64], cols: usize, rows: usize| -> Vec<Vec<Complex64>> {
            (0..cols)
                .map(|c| {
                    (0..rows)
                        .map(|r| {
                            let k = 2 * (c * rows + r);
                            Complex64::new(flat[k], flat[k + 1])
                        })
                        .collect()
                })
                .collect()
        };
        if blocks.len() != 5 {
            return Err(Error::Shape(format!("expected 5 blocks, got {}", blocks.len())));
        }
        Ok(BeamformingState {
            p_u: blocks[BLOCK_P_U].clone(),
            p: unflatten_c(&blocks[BLOCK_P], cfg.d, cfg.n_t),
            layout: AntennaLayout::from_flat(cfg.n_t, cfg.n_rc, cfg.n_rs, &blocks[BLOCK_L])?,
            z: unflatten_c(&blocks[BLOCK_Z], cfg.u, cfg.n_rc),
            v: blocks[BLOCK_V]
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect(),
        })
    }

    fn layout_vars(&self, coords: &[Var]) -> LayoutVars {
        let cfg = &self.cfg;
        let take = |range: std::ops::Range<usize>| {
            coords[range]
                .chunks_exact(2)
                .map(|p| [p[0], p[1]])
                .collect::<Vec<_>>()
        };
        LayoutVars {
            t_bs: take(0..2 * cfg.n_t),
            r_bs_c: take(2 * cfg.n_t..2 * (cfg.n_t + cfg.n_rc)),
            r_bs_s: take(2 * (cfg.n_t + cfg.n_rc)..2 * (cfg.n_t + cfg.n_rc + cfg.n_rs)),
        }
    }

    fn state_vars(&self, state: &[Vec<Var>]) -> StateVars {
        let cfg = &self.cfg;
        let cols_c = |flat: &[Var], cols: usize, rows: usize| -> Vec<Vec<CVar>> {
            (0..cols)
                .map(|c| {
                    (0..rows)
                        .map(|r| {
                            let k = 2 * (c * rows + r);
                            CVar {
                                re: flat[k],
                                im: flat[k + 1],
                            }
                        })
                        .collect()
                })
                .collect()
        };
        StateVars {
            p: cols_c(&state[BLOCK_P], cfg.d, cfg.n_t),
            p_u: state[BLOCK_P_U].clone(),
            z: cols_c(&state[BLOCK_Z], cfg.u, cfg.n_rc),
            v: state[BLOCK_V]
                .chunks_exact(2)
                .map(|p| CVar { re: p[0], im: p[1] })
                .collect(),
            layout: self.layout_vars(&state[BLOCK_L]),
        }
    }

    /// Channels for the current layout vars, rebuilt only when the layout
    /// node ids change.
    fn channels(&self, g: &mut Graph, layout: &LayoutVars) -> Result<crate::channel::ChannelVars> {
        let ids = layout.flatten();
        {
            let cache = self.cache.borrow();
            if cache.generation == g.generation()
                && cache.layout_ids == ids
                && cache.channels.is_some()
            {
                return Ok(cache.channels.clone().unwrap());
            }
        }
        let ch = crate::channel::rebuild_channels(g, &self.cfg, layout, &self.real)?;
        let mut cache = self.cache.borrow_mut();
        cache.generation = g.generation();
        cache.layout_ids = ids;
        cache.channels = Some(ch.clone());
        Ok(ch)
    }
}

impl MetaProblem for IsacProblem {
    fn block_specs(&self) -> Vec<BlockSpec> {
        let cfg = &self.cfg;
        vec![
            BlockSpec {
                name: "p_u",
                network_id: "UPN",
                len: cfg.u,
            },
            BlockSpec {
                name: "p",
                network_id: "PN",
                len: 2 * cfg.n_t * cfg.d,
            },
            BlockSpec {
                name: "layout",
                network_id: "MAN",
                len: 2 * (cfg.n_t + cfg.n_rc + cfg.n_rs),
            },
            BlockSpec {
                name: "z",
                network_id: "CRBN",
                len: 2 * cfg.n_rc * cfg.u,
            },
            BlockSpec {
                name: "v",
                network_id: "SRBN",
                len: 2 * cfg.n_rs,
            },
        ]
    }

    fn initial_state(&self, rng: &mut ChaCha12Rng) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.cfg;
        // Transmit beams: circularly-symmetric Gaussian at the power budget
        // scale, then projected onto the budget.
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
        let p = project_transmit_power(&p, cfg.p_bs);
        let state = BeamformingState {
            p,
            p_u: vec![cfg.p_u_max / 2.0; cfg.u],
            z: vec![vec![Complex64::new(1.0, 0.0); cfg.n_rc]; cfg.u],
            v: vec![Complex64::new(1.0, 0.0); cfg.n_rs],
            layout: AntennaLayout::fpa_grid(cfg)?,
        };
        Ok(Self::state_to_blocks(&state))
    }

    fn meta_loss(&self, g: &mut Graph, state: &[Vec<Var>]) -> Result<Var> {
        let st = self.state_vars(state);
        let ch = self.channels(g, &st.layout)?;
        let m = metrics_tape(g, &ch, &st, &self.cfg, self.si_form)?;
        Ok(meta_loss_tape(g, &m, &st.layout, &self.cfg, self.mode))
    }

    fn project_step(&self, g: &mut Graph, block: usize, vars: &mut Vec<Var>) -> Result<()> {
        match block {
            BLOCK_P_U => {
                if self.mode == PenaltyMode::SoftHinge {
                    for v in vars.iter_mut() {
                        *v = g.clamp(*v, 0.0, self.cfg.p_u_max);
                    }
                }
                Ok(())
            }
            BLOCK_P => Ok(()),
            BLOCK_L => {
                let mut lv = self.layout_vars(vars);
                clamp_layout_tape(g, &mut lv, &self.cfg)?;
                *vars = lv.flatten();
                Ok(())
            }
            BLOCK_Z | BLOCK_V => {
                let mut cv: Vec<CVar> = vars
                    .chunks_exact(2)
                    .map(|p| CVar { re: p[0], im: p[1] })
                    .collect();
                normalize_unit_modulus_tape(g, &mut cv);
                *vars = cv.iter().flat_map(|z| [z.re, z.im]).collect();
                Ok(())
            }
            other => Err(Error::Shape(format!("unknown block index {other}"))),
        }
    }

    fn project_outer(&self, g: &mut Graph, state: &mut [Vec<Var>]) -> Result<()> {
        let cfg = &self.cfg;
        let mut p: Vec<Vec<CVar>> = (0..cfg.d)
            .map(|c| {
                (0..cfg.n_t)
                    .map(|r| {
                        let k = 2 * (c * cfg.n_t + r);
                        CVar {
                            re: state[BLOCK_P][k],
                            im: state[BLOCK_P][k + 1],
                        }
                    })
                    .collect()
            })
            .collect();
        project_transmit_power_tape(g, &mut p, cfg.p_bs);
        state[BLOCK_P] = p
            .iter()
            .flat_map(|col| col.iter().flat_map(|z| [z.re, z.im]))
            .collect();
        Ok(())
    }

    fn begin_block_eval(&self, block: usize) {
        if block == BLOCK_L {
            // The channels depend on the layout; force a rebuild inside the
            // gradient window.
            self.cache.borrow_mut().channels = None;
        }
    }

    fn frozen_mask(&self, block: usize) -> Option<Vec<bool>> {
        if block != BLOCK_L {
            return None;
        }
        if !(self.frozen.tx || self.frozen.rx_c || self.frozen.rx_s) {
            return None;
        }
        let cfg = &self.cfg;
        let mut mask = Vec::with_capacity(2 * (cfg.n_t + cfg.n_rc + cfg.n_rs));
        mask.extend(std::iter::repeat(self.frozen.tx).take(2 * cfg.n_t));
        mask.extend(std::iter::repeat(self.frozen.rx_c).take(2 * cfg.n_rc));
        mask.extend(std::iter::repeat(self.frozen.rx_s).take(2 * cfg.n_rs));
        Some(mask)
    }

    fn evaluate_candidate(&self, state: &[Vec<f64>]) -> Result<CandidateEval> {
        let bs = Self::blocks_to_state(&self.cfg, state)?;
        let ch = crate::channel::channels_at(&self.cfg, &bs.layout, &self.real)?;
        let report = full_report_with(&ch, &bs, &self.cfg, self.si_form)?;
        let (feasible, _) = feasibility(&report, &bs.layout, &self.cfg);
        Ok(CandidateEval {
            objective: report.lambda_t,
            feasible,
        })
    }
}

/// A solved instance: the best state found, its metrics, and whether it
/// satisfies the full constraint set. Produced by both the meta-learning
/// path and the classical baselines.
#[derive(Clone, Debug, Serialize)]
pub struct Solution {
    pub scheme: Scheme,
    pub seed: u64,
    pub state: BeamformingState,
    pub report: MetricsReport,
    pub feasible: bool,
    pub lambda_t: f64,
}

/// Run the meta-learning optimizer on one channel realization. `seed`
/// drives the initial point and learner weights; the same seed and inputs
/// reproduce the run bit for bit.
pub fn run(
    cfg: &ScenarioConfig,
    real: &Realization,
    gml: &GmlConfig,
    seed: u64,
    frozen: FrozenGroups,
    si_form: SiForm,
) -> Result<(Solution, OptimizationTrace)> {
    cfg.validate()?;
    let problem = IsacProblem::new(cfg.clone(), real.clone(), gml.penalty_mode, si_form, frozen);
    let outcome = run_meta(&problem, gml, seed)?;
    let state = IsacProblem::blocks_to_state(cfg, &outcome.best_state)?;
    let ch = crate::channel::channels_at(cfg, &state.layout, real)?;
    let report = full_report_with(&ch, &state, cfg, si_form)?;
    let (feasible, _) = feasibility(&report, &state.layout, cfg);
    let scheme = match frozen {
        f if f == FrozenGroups::all() => Scheme::FpaBoth,
        f if f == FrozenGroups::rx_s_only() => Scheme::MaFdOnly,
        _ => Scheme::Ma,
    };
    Ok((
        Solution {
            scheme,
            seed,
            lambda_t: report.lambda_t,
            feasible,
            state,
            report,
        },
        outcome.trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_paths;
    use crate::diffcore::Graph;
    use rand::Rng;

    fn tiny_cfg() -> ScenarioConfig {
        ScenarioConfig {
            n_t: 2,
            n_rc: 2,
            n_rs: 2,
            d: 1,
            u: 1,
            c: 0,
            l_t: 2,
            l_r: 2,
            ..ScenarioConfig::default()
        }
    }

    fn tiny_problem(mode: PenaltyMode) -> IsacProblem {
        let cfg = tiny_cfg();
        let real = sample_paths(&cfg, 3).unwrap();
        IsacProblem::new(cfg, real, mode, SiForm::Quadratic, FrozenGroups::default())
    }

    fn zero_nets(problem: &impl MetaProblem, hidden: usize) -> Vec<LearnerNetwork> {
        problem
            .block_specs()
            .iter()
            .map(|s| {
                let mut rng = ChaCha12Rng::seed_from_u64(1);
                let mut n = LearnerNetwork::new(s.network_id, s.len, hidden, 1e-2, &mut rng);
                n.w1.fill(0.0);
                n
            })
            .collect()
    }

    /// A learner that computes exactly `delta = eta * grad`, built from the
    /// identity decomposition `leaky(x) - leaky(-x) = (1 + slope) x`.
    fn identity_net(io: usize, eta: f64) -> LearnerNetwork {
        let hidden = 2 * io;
        let mut w1 = vec![0.0; hidden * io];
        for k in 0..io {
            w1[k * io + k] = 1.0;
            w1[(io + k) * io + k] = -1.0;
        }
        let mut w2 = vec![0.0; io * hidden];
        let c = eta / (1.0 + LEAKY_SLOPE);
        for k in 0..io {
            w2[k * hidden + k] = c;
            w2[k * hidden + io + k] = -c;
        }
        LearnerNetwork {
            network_id: "identity".into(),
            io,
            hidden,
            step_scale: 1.0,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; io],
        }
    }

    #[test]
    fn learner_zero_weights_zero_delta() {
        let mut g = Graph::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut net = LearnerNetwork::new("PN", 6, 9, 1e-2, &mut rng);
        net.w2.fill(0.0);
        net.b2.fill(0.0);
        let nv = LearnerVars::bind(&mut g, &net);
        let grad: Vec<Var> = (0..6).map(|_| g.leaf(rng.gen_range(-1.0..1.0))).collect();
        let delta = learner_forward(&mut g, &nv, &grad).unwrap();
        assert_eq!(delta.len(), 6);
        for d in delta {
            assert_eq!(g.value(d), 0.0);
        }
    }

    #[test]
    fn learner_width_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let net = LearnerNetwork::new("PN", 4, 8, 1e-2, &mut rng);
        let nv = LearnerVars::bind(&mut g, &net);
        let grad: Vec<Var> = (0..3).map(|_| g.leaf(0.1)).collect();
        assert!(matches!(
            learner_forward(&mut g, &nv, &grad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn identity_net_is_identity() {
        let mut g = Graph::new();
        let net = identity_net(3, 0.05);
        let nv = LearnerVars::bind(&mut g, &net);
        let grad = [g.leaf(1.5), g.leaf(-0.7), g.leaf(0.0)];
        let delta = learner_forward(&mut g, &nv, &grad).unwrap();
        for (d, want) in delta.iter().zip([0.075, -0.035, 0.0]) {
            assert!((g.value(*d) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn learner_gradient_wrt_weights_matches_fd() {
        use crate::diffcore::{
            bundle_relative_error, evaluate_with_gradient, finite_difference_gradient,
            BoundBlock, ParameterBlock,
        };
        let io = 3;
        let hidden = 4;
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut net = LearnerNetwork::new("MAN", io, hidden, 0.5, &mut rng);
        for w in net.w2.iter_mut().chain(net.b2.iter_mut()).chain(net.b1.iter_mut()) {
            *w = rng.gen_range(-0.5..0.5);
        }
        let grad_in: Vec<f64> = (0..io).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let blocks = vec![ParameterBlock::real("theta", vec![net.param_count()], net.params()).unwrap()];
        let net2 = net.clone();
        // Scalar probe: sum of deltas squared.
        let program = move |g: &mut Graph, bb: &[BoundBlock]| {
            let flat = bb[0].as_vars();
            let (a, b) = (net2.w1.len(), net2.b1.len());
            let c = net2.w2.len();
            let nv = LearnerVars {
                io,
                hidden,
                step_scale: net2.step_scale,
                w1: flat[..a].to_vec(),
                b1: flat[a..a + b].to_vec(),
                w2: flat[a + b..a + b + c].to_vec(),
                b2: flat[a + b + c..].to_vec(),
            };
            let gv: Vec<Var> = grad_in.iter().map(|&x| g.leaf(x)).collect();
            let delta = learner_forward(g, &nv, &gv)?;
            let sq: Vec<Var> = delta.iter().map(|&d| g.square(d)).collect();
            Ok(g.sum(&sq))
        };
        let (_, ad) = evaluate_with_gradient(&blocks, &program).unwrap();
        let fd = finite_difference_gradient(&blocks, 1e-6, &program).unwrap();
        assert!(bundle_relative_error(&ad, &fd) < 1e-5);
    }

    #[test]
    fn zero_weight_cycle_leaves_state_unchanged() {
        let problem = tiny_problem(PenaltyMode::SoftHinge);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let init = problem.initial_state(&mut rng).unwrap();
        let nets = zero_nets(&problem, 6);
        let mut g = Graph::new();
        let nv: Vec<LearnerVars> = nets.iter().map(|n| LearnerVars::bind(&mut g, n)).collect();
        let mut state: Vec<Vec<Var>> = init.iter().map(|b| g.leaves(b)).collect();
        inner_cycle(&problem, &mut g, &nv, &mut state).unwrap();
        for (b, vals) in init.iter().enumerate() {
            let got = g.values(&state[b]);
            for (x, y) in vals.iter().zip(&got) {
                assert_eq!(x.to_bits(), y.to_bits(), "block {b}");
            }
        }
    }

    #[test]
    fn cycle_touches_only_blocks_with_nonzero_learners() {
        let problem = tiny_problem(PenaltyMode::SoftHinge);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let init = problem.initial_state(&mut rng).unwrap();
        let mut nets = zero_nets(&problem, 6);
        // Give only the transmit-beam learner nonzero output weights.
        let mut wrng = ChaCha12Rng::seed_from_u64(10);
        let pn = &mut nets[BLOCK_P];
        for w in pn.w1.iter_mut().chain(pn.w2.iter_mut()) {
            *w = wrng.gen_range(-0.3..0.3);
        }
        let mut g = Graph::new();
        let nv: Vec<LearnerVars> = nets.iter().map(|n| LearnerVars::bind(&mut g, n)).collect();
        let mut state: Vec<Vec<Var>> = init.iter().map(|b| g.leaves(b)).collect();
        inner_cycle(&problem, &mut g, &nv, &mut state).unwrap();
        for (b, vals) in init.iter().enumerate() {
            let got = g.values(&state[b]);
            let same = vals
                .iter()
                .zip(&got)
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if b == BLOCK_P {
                assert!(!same, "transmit beams should move");
            } else {
                assert!(same, "block {b} should be untouched");
            }
        }
    }

    #[test]
    fn identity_learners_match_hand_rolled_projected_ascent() {
        let problem = tiny_problem(PenaltyMode::SoftHinge);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let init = problem.initial_state(&mut rng).unwrap();
        let eta = 0.02;
        let specs = problem.block_specs();
        let nets: Vec<LearnerNetwork> = specs.iter().map(|s| identity_net(s.len, eta)).collect();

        // The cycle under test.
        let mut g = Graph::new();
        let nv: Vec<LearnerVars> = nets.iter().map(|n| LearnerVars::bind(&mut g, n)).collect();
        let mut state: Vec<Vec<Var>> = init.iter().map(|b| g.leaves(b)).collect();
        inner_cycle(&problem, &mut g, &nv, &mut state).unwrap();
        let got: Vec<Vec<f64>> = state.iter().map(|b| g.values(b)).collect();

        // Hand-rolled sequential projected gradient ascent with step eta.
        let mut hand: Vec<Vec<f64>> = init.clone();
        for b in 0..hand.len() {
            let mut g2 = Graph::new();
            let vars: Vec<Vec<Var>> = hand.iter().map(|blk| g2.leaves(blk)).collect();
            let mark = g2.mark();
            let loss = problem.meta_loss(&mut g2, &vars).unwrap();
            let obj = g2.neg(loss);
            let grads = g2.backward_graph(obj, mark, &vars[b]);
            let gvals = g2.values(&grads);
            for (x, gr) in hand[b].iter_mut().zip(gvals) {
                *x += eta * gr;
            }
            // Apply the same per-step projection.
            let mut g3 = Graph::new();
            let mut bvars = g3.leaves(&hand[b]);
            problem.project_step(&mut g3, b, &mut bvars).unwrap();
            hand[b] = g3.values(&bvars);
        }

        for b in 0..hand.len() {
            for (x, y) in hand[b].iter().zip(&got[b]) {
                assert!(
                    (x - y).abs() < 1e-9,
                    "block {b}: hand {x} vs cycle {y}"
                );
            }
        }
    }

    #[test]
    fn outer_iteration_edge_cases() {
        // Thresholds relaxed so the initialization is feasible.
        let cfg = ScenarioConfig {
            r_th_d: 0.0,
            r_th_u: 0.0,
            lambda_th_s: -1e9,
            ..tiny_cfg()
        };
        let real = sample_paths(&cfg, 3).unwrap();
        let problem = IsacProblem::new(
            cfg.clone(),
            real,
            PenaltyMode::SoftHinge,
            SiForm::Quadratic,
            FrozenGroups::default(),
        );
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let init = problem.initial_state(&mut rng).unwrap();
        let nets = zero_nets(&problem, 4);

        let mut g = Graph::new();
        let nv: Vec<LearnerVars> = nets.iter().map(|n| LearnerVars::bind(&mut g, n)).collect();
        let init_vars: Vec<Vec<Var>> = init.iter().map(|b| g.leaves(b)).collect();

        // n_i = 0: the loss of the (projected) initialization.
        let (l0, state0) = outer_iteration(&problem, &mut g, &nv, &init_vars, 0).unwrap();
        let vals0: Vec<Vec<f64>> = state0.iter().map(|b| g.values(b)).collect();
        let eval0 = problem.evaluate_candidate(&vals0).unwrap();
        assert!(eval0.feasible);
        // Feasible, so the loss is exactly -Lambda_t.
        assert!((g.value(l0) + eval0.objective).abs() < 1e-9);

        // Determinism: identical nets and init give identical losses.
        let (l1, _) = outer_iteration(&problem, &mut g, &nv, &init_vars, 2).unwrap();
        let (l2, _) = outer_iteration(&problem, &mut g, &nv, &init_vars, 2).unwrap();
        assert_eq!(g.value(l1).to_bits(), g.value(l2).to_bits());
    }

    #[test]
    fn epoch_zero_candidate_is_projected_initialization() {
        let problem = tiny_problem(PenaltyMode::SoftHinge);
        let gml = GmlConfig {
            n_i: 3,
            n_o: 2,
            n_e: 1,
            hidden: 4,
            ..GmlConfig::default()
        };
        // Default nets have a zero output layer, so every delta is zero and
        // the epoch-0 candidate must equal the initialization.
        let outcome = run_meta(&problem, &gml, 21).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let init = problem.initial_state(&mut rng).unwrap();
        for (b, vals) in init.iter().enumerate() {
            for (x, y) in vals.iter().zip(&outcome.best_state[b]) {
                assert!((x - y).abs() < 1e-12, "block {b}");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut adam = AdamState::new(3);
        let mut params = vec![0.5, -0.2, 1.0];
        let orig = params.clone();
        adam.step(&mut params, &[0.0, 0.0, 0.0], 1e-2);
        assert_eq!(params, orig);
    }

    /// Scalar concave toy: maximize -x^2 from x0 = 1.
    struct ToyProblem;

    impl MetaProblem for ToyProblem {
        fn block_specs(&self) -> Vec<BlockSpec> {
            vec![BlockSpec {
                name: "x",
                network_id: "XN",
                len: 1,
            }]
        }

        fn initial_state(&self, _rng: &mut ChaCha12Rng) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![1.0]])
        }

        fn meta_loss(&self, g: &mut Graph, state: &[Vec<Var>]) -> Result<Var> {
            Ok(g.square(state[0][0]))
        }

        fn project_step(&self, _g: &mut Graph, _block: usize, _vars: &mut Vec<Var>) -> Result<()> {
            Ok(())
        }

        fn project_outer(&self, _g: &mut Graph, _state: &mut [Vec<Var>]) -> Result<()> {
            Ok(())
        }

        fn evaluate_candidate(&self, state: &[Vec<f64>]) -> Result<CandidateEval> {
            Ok(CandidateEval {
                objective: -state[0][0] * state[0][0],
                feasible: true,
            })
        }
    }

    #[test]
    fn toy_concave_objective_converges() {
        let gml = GmlConfig {
            n_i: 5,
            n_o: 1,
            n_e: 200,
            hidden: 8,
            meta_lr: 1e-2,
            step_scale: 0.1,
            ..GmlConfig::default()
        };
        let outcome = run_meta(&ToyProblem, &gml, 4).unwrap();
        assert!(
            outcome.best_objective > -1e-3,
            "best objective {}",
            outcome.best_objective
        );
        // Running max is non-decreasing.
        let mut prev = f64::NEG_INFINITY;
        for r in &outcome.trace.epochs {
            assert!(r.best_objective >= prev);
            prev = r.best_objective;
        }
    }

    #[test]
    fn run_is_deterministic_and_trace_monotone() {
        let cfg = tiny_cfg();
        let real = sample_paths(&cfg, 5).unwrap();
        let gml = GmlConfig {
            n_i: 3,
            n_o: 2,
            n_e: 8,
            hidden: 6,
            ..GmlConfig::default()
        };
        let (sol_a, trace_a) = run(&cfg, &real, &gml, 17, FrozenGroups::default(), SiForm::Quadratic).unwrap();
        let (sol_b, trace_b) = run(&cfg, &real, &gml, 17, FrozenGroups::default(), SiForm::Quadratic).unwrap();
        assert_eq!(sol_a.lambda_t.to_bits(), sol_b.lambda_t.to_bits());
        assert_eq!(sol_a.state.p_u, sol_b.state.p_u);
        assert_eq!(sol_a.state.layout, sol_b.state.layout);
        for (a, b) in trace_a.epochs.iter().zip(&trace_b.epochs) {
            assert_eq!(a.mean_meta_loss.to_bits(), b.mean_meta_loss.to_bits());
            assert_eq!(a.best_objective.to_bits(), b.best_objective.to_bits());
        }
        let mut prev = f64::NEG_INFINITY;
        for r in &trace_a.epochs {
            assert!(r.best_objective >= prev);
            prev = r.best_objective;
        }
        // A different seed changes the run.
        let (sol_c, _) = run(&cfg, &real, &gml, 18, FrozenGroups::default(), SiForm::Quadratic).unwrap();
        assert_ne!(sol_a.lambda_t.to_bits(), sol_c.lambda_t.to_bits());
    }

    #[test]
    fn frozen_groups_pin_layout_coordinates() {
        let cfg = tiny_cfg();
        let real = sample_paths(&cfg, 6).unwrap();
        let gml = GmlConfig {
            n_i: 3,
            n_o: 1,
            n_e: 6,
            hidden: 6,
            ..GmlConfig::default()
        };
        let grid = AntennaLayout::fpa_grid(&cfg).unwrap();
        let (sol, _) = run(&cfg, &real, &gml, 30, FrozenGroups::all(), SiForm::Quadratic).unwrap();
        assert_eq!(sol.scheme, Scheme::FpaBoth);
        assert_eq!(sol.state.layout, grid);
        let (sol, _) = run(&cfg, &real, &gml, 30, FrozenGroups::rx_s_only(), SiForm::Quadratic).unwrap();
        assert_eq!(sol.scheme, Scheme::MaFdOnly);
        assert_eq!(sol.state.layout.r_bs_s, grid.r_bs_s);
    }

    #[test]
    fn epoch_gradient_matches_finite_differences_on_miniature_problem() {
        let problem = tiny_problem(PenaltyMode::SoftHinge);
        let gml = GmlConfig {
            n_i: 2,
            n_o: 1,
            n_e: 1,
            hidden: 3,
            step_scale: 1e-2,
            ..GmlConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let init = problem.initial_state(&mut rng).unwrap();
        let mut nets: Vec<LearnerNetwork> = problem
            .block_specs()
            .iter()
            .map(|s| LearnerNetwork::new(s.network_id, s.len, gml.hidden, gml.step_scale, &mut rng))
            .collect();
        // Randomize the output layers too, so the second-order path through
        // the emitted gradients is actually exercised.
        for n in nets.iter_mut() {
            for w in n.w2.iter_mut().chain(n.b2.iter_mut()) {
                *w = rng.gen_range(-0.2..0.2);
            }
        }

        let epoch_loss = |nets: &[LearnerNetwork]| -> f64 {
            let mut g = Graph::new();
            let nv: Vec<LearnerVars> = nets.iter().map(|n| LearnerVars::bind(&mut g, n)).collect();
            let init_vars: Vec<Vec<Var>> = init.iter().map(|b| g.leaves(b)).collect();
            let mut tracker = BestTracker::new();
            let loss = epoch_forward(&problem, &mut g, &nv, &init_vars, &gml, &mut tracker).unwrap();
            g.value(loss)
        };

        // Reverse-mode gradients for every learner weight.
        let mut g = Graph::new();
        let nv: Vec<LearnerVars> = nets.iter().map(|n| LearnerVars::bind(&mut g, n)).collect();
        let init_vars: Vec<Vec<Var>> = init.iter().map(|b| g.leaves(b)).collect();
        let mut tracker = BestTracker::new();
        let loss = epoch_forward(&problem, &mut g, &nv, &init_vars, &gml, &mut tracker).unwrap();
        let adj = g.backward_numeric(loss);

        // Finite differences on a deterministic sample of weights from every
        // network and layer.
        let h = 1e-5;
        let mut max_err: f64 = 0.0;
        let mut max_ref: f64 = 0.0;
        for (ni, net) in nets.iter().enumerate() {
            let count = net.param_count();
            let vars = nv[ni].all_vars();
            for k in (0..count).step_by((count / 8).max(1)) {
                let mut up = nets.clone();
                let mut params = up[ni].params();
                params[k] += h;
                up[ni].set_params(&params);
                let f_up = epoch_loss(&up);
                let mut down = nets.clone();
                let mut params = down[ni].params();
                params[k] -= h;
                down[ni].set_params(&params);
                let f_down = epoch_loss(&down);
                let fd = (f_up - f_down) / (2.0 * h);
                let ad = adj[vars[k].index()];
                max_err = max_err.max((fd - ad).abs());
                max_ref = max_ref.max(fd.abs());
            }
        }
        assert!(max_ref > 0.0, "degenerate test: all sampled gradients zero");
        let rel = max_err / max_ref;
        assert!(rel < 1e-4, "epoch gradient relative error {rel:e}");
    }
}
