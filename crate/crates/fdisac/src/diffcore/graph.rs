//! Flat-tape reverse-mode differentiation over real scalars.
//!
//! Every value on the tape is a real `f64`; complex quantities are handled
//! one level up as pairs of tape variables (see [`super::complex`]). Values
//! are computed eagerly as operations are pushed, so a [`Graph`] holds both
//! the program and its forward evaluation at all times.
//!
//! Two backward sweeps are provided:
//!
//! * [`Graph::backward_numeric`] — plain adjoint accumulation into an `f64`
//!   buffer, used for first-order gradients.
//! * [`Graph::backward_graph`] — adjoint accumulation that *emits new tape
//!   operations*, so the gradient itself stays differentiable. This is what
//!   lets a meta-loss be backpropagated through an optimizer trajectory that
//!   consumed gradients as inputs.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(0);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a tape value. Cheap to copy; only valid for the graph (and
/// generation) that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Var(pub(crate) u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[repr(u8)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Ln,
    Exp,
    Sqrt,
    Max,
    Min,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Ln => "ln",
            Op::Exp => "exp",
            Op::Sqrt => "sqrt",
            Op::Max => "max",
            Op::Min => "min",
        }
    }
}

#[derive(Clone, Copy)]
struct Node {
    op: Op,
    a: u32,
    b: u32,
}

/// First non-finite value seen during forward evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub op_index: usize,
    pub op: Op,
}

/// The recording tape. Rebuilt (via [`Graph::clear`]) for every evaluation;
/// a single graph is strictly single-threaded.
pub struct Graph {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    fault: Option<Fault>,
    generation: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            vals: Vec::new(),
            fault: None,
            generation: fresh_generation(),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Graph {
            nodes: Vec::with_capacity(n),
            vals: Vec::with_capacity(n),
            fault: None,
            generation: fresh_generation(),
        }
    }

    /// Drop all recorded operations but keep allocations. Vars from earlier
    /// generations are invalidated; generation values are unique across all
    /// graphs in the process, so they key caches safely.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.fault = None;
        self.generation = fresh_generation();
    }

    /// Current tape length; used as a window marker for scoped backward
    /// sweeps and for [`Graph::truncate`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Roll the tape back to a previous [`Graph::mark`].
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.vals.truncate(mark);
        if let Some(f) = self.fault {
            if f.op_index >= mark {
                self.fault = None;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn fault(&self) -> Option<Fault> {
        self.fault
    }

    /// Convert a recorded fault into an error, if any.
    pub fn check_fault(&self) -> Result<()> {
        match self.fault {
            Some(f) => Err(Error::NumericFault {
                op_index: f.op_index,
                op: f.op.name(),
                context: String::new(),
            }),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.index()]
    }

    pub fn values(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.value(v)).collect()
    }

    #[inline]
    fn push(&mut self, op: Op, a: u32, b: u32, val: f64) -> Var {
        let idx = self.nodes.len() as u32;
        if !val.is_finite() && self.fault.is_none() {
            self.fault = Some(Fault {
                op_index: idx as usize,
                op,
            });
        }
        self.nodes.push(Node { op, a, b });
        self.vals.push(val);
        Var(idx)
    }

    /// A constant or input value on the tape.
    pub fn leaf(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, 0, 0, v)
    }

    pub fn leaves(&mut self, vs: &[f64]) -> Vec<Var> {
        vs.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] + self.vals[b.index()];
        self.push(Op::Add, a.0, b.0, v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] - self.vals[b.index()];
        self.push(Op::Sub, a.0, b.0, v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] * self.vals[b.index()];
        self.push(Op::Mul, a.0, b.0, v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] / self.vals[b.index()];
        self.push(Op::Div, a.0, b.0, v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.vals[a.index()];
        self.push(Op::Neg, a.0, 0, v)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()].sin();
        self.push(Op::Sin, a.0, 0, v)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()].cos();
        self.push(Op::Cos, a.0, 0, v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()].ln();
        self.push(Op::Ln, a.0, 0, v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()].exp();
        self.push(Op::Exp, a.0, 0, v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()].sqrt();
        self.push(Op::Sqrt, a.0, 0, v)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()].max(self.vals[b.index()]);
        self.push(Op::Max, a.0, b.0, v)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()].min(self.vals[b.index()]);
        self.push(Op::Min, a.0, b.0, v)
    }

    // -- derived helpers ---------------------------------------------------

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = self.leaf(c);
        self.mul(a, c)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let c = self.leaf(c);
        self.add(a, c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Base-2 logarithm, `ln(x)/ln(2)`. Non-positive arguments produce a
    /// numeric fault through the `ln` domain.
    pub fn log2(&mut self, a: Var) -> Var {
        let l = self.ln(a);
        self.scale(l, 1.0 / std::f64::consts::LN_2)
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let c = self.leaf(c);
        self.max(a, c)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let l = self.leaf(lo);
        let h = self.leaf(hi);
        let m = self.max(a, l);
        self.min(m, h)
    }

    /// Leaky rectifier `max(x,0) + slope*min(x,0)`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let zero = self.leaf(0.0);
        let pos = self.max(a, zero);
        let neg = self.min(a, zero);
        let neg_s = self.scale(neg, slope);
        self.add(pos, neg_s)
    }

    pub fn sum(&mut self, vars: &[Var]) -> Var {
        match vars.split_first() {
            None => self.leaf(0.0),
            Some((&first, rest)) => {
                let mut acc = first;
                for &v in rest {
                    acc = self.add(acc, v);
                }
                acc
            }
        }
    }

    /// Dot product of two equal-length slices.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = self.leaf(0.0);
        for (&x, &y) in a.iter().zip(b) {
            let p = self.mul(x, y);
            acc = self.add(acc, p);
        }
        acc
    }

    // -- backward sweeps ---------------------------------------------------

    /// Plain reverse sweep from `seed`; returns an adjoint for every tape
    /// position up to and including the seed.
    pub fn backward_numeric(&self, seed: Var) -> Vec<f64> {
        let end = seed.index();
        let mut adj = vec![0.0f64; end + 1];
        adj[end] = 1.0;
        for i in (0..=end).rev() {
            let w = adj[i];
            if w == 0.0 {
                continue;
            }
            let n = self.nodes[i];
            let (a, b) = (n.a as usize, n.b as usize);
            match n.op {
                Op::Leaf => {}
                Op::Add => {
                    adj[a] += w;
                    adj[b] += w;
                }
                Op::Sub => {
                    adj[a] += w;
                    adj[b] -= w;
                }
                Op::Mul => {
                    adj[a] += w * self.vals[b];
                    adj[b] += w * self.vals[a];
                }
                Op::Div => {
                    adj[a] += w / self.vals[b];
                    adj[b] -= w * self.vals[i] / self.vals[b];
                }
                Op::Neg => {
                    adj[a] -= w;
                }
                Op::Sin => {
                    adj[a] += w * self.vals[a].cos();
                }
                Op::Cos => {
                    adj[a] -= w * self.vals[a].sin();
                }
                Op::Ln => {
                    adj[a] += w / self.vals[a];
                }
                Op::Exp => {
                    adj[a] += w * self.vals[i];
                }
                Op::Sqrt => {
                    adj[a] += w / (2.0 * self.vals[i]);
                }
                Op::Max => {
                    if self.vals[a] >= self.vals[b] {
                        adj[a] += w;
                    } else {
                        adj[b] += w;
                    }
                }
                Op::Min => {
                    if self.vals[a] <= self.vals[b] {
                        adj[a] += w;
                    } else {
                        adj[b] += w;
                    }
                }
            }
        }
        adj
    }

    /// Reverse sweep from `seed` restricted to the window
    /// `[window_start, seed]`, emitting the adjoint computation as new tape
    /// operations so it remains differentiable.
    ///
    /// Tape positions below `window_start` are treated as constants, except
    /// for the variables listed in `wrt`, whose adjoints are accumulated and
    /// returned (in `wrt` order; zero leaf when no path exists). This is the
    /// "gradient w.r.t. one block, holding the rest fixed" primitive.
    pub fn backward_graph(&mut self, seed: Var, window_start: usize, wrt: &[Var]) -> Vec<Var> {
        let end = seed.index();
        assert!(end >= window_start, "seed must lie inside the window");
        let width = end + 1 - window_start;
        let mut adj: Vec<Option<Var>> = vec![None; width];
        let mut wrt_slots: HashMap<u32, usize> = HashMap::with_capacity(wrt.len());
        for (k, v) in wrt.iter().enumerate() {
            wrt_slots.insert(v.0, k);
        }
        let mut wrt_adj: Vec<Option<Var>> = vec![None; wrt.len()];

        let one = self.leaf(1.0);
        adj[width - 1] = Some(one);

        // Accumulate `delta` into the adjoint slot for tape position `t`.
        macro_rules! acc {
            ($self:ident, $t:expr, $delta:expr) => {{
                let t = $t;
                let delta = $delta;
                if t >= window_start {
                    let slot = &mut adj[t - window_start];
                    *slot = Some(match *slot {
                        Some(prev) => $self.add(prev, delta),
                        None => delta,
                    });
                } else if let Some(&k) = wrt_slots.get(&(t as u32)) {
                    let slot = &mut wrt_adj[k];
                    *slot = Some(match *slot {
                        Some(prev) => $self.add(prev, delta),
                        None => delta,
                    });
                }
            }};
        }

        for i in (window_start..=end).rev() {
            let Some(w) = adj[i - window_start] else {
                continue;
            };
            let n = self.nodes[i];
            let (a, b) = (n.a as usize, n.b as usize);
            let (va, vb) = (Var(n.a), Var(n.b));
            match n.op {
                Op::Leaf => {}
                Op::Add => {
                    acc!(self, a, w);
                    acc!(self, b, w);
                }
                Op::Sub => {
                    acc!(self, a, w);
                    let nw = self.neg(w);
                    acc!(self, b, nw);
                }
                Op::Mul => {
                    let da = self.mul(w, vb);
                    acc!(self, a, da);
                    let db = self.mul(w, va);
                    acc!(self, b, db);
                }
                Op::Div => {
                    let da = self.div(w, vb);
                    acc!(self, a, da);
                    let q = self.mul(w, Var(i as u32));
                    let qb = self.div(q, vb);
                    let db = self.neg(qb);
                    acc!(self, b, db);
                }
                Op::Neg => {
                    let nw = self.neg(w);
                    acc!(self, a, nw);
                }
                Op::Sin => {
                    let c = self.cos(va);
                    let da = self.mul(w, c);
                    acc!(self, a, da);
                }
                Op::Cos => {
                    let s = self.sin(va);
                    let ws = self.mul(w, s);
                    let da = self.neg(ws);
                    acc!(self, a, da);
                }
                Op::Ln => {
                    let da = self.div(w, va);
                    acc!(self, a, da);
                }
                Op::Exp => {
                    let da = self.mul(w, Var(i as u32));
                    acc!(self, a, da);
                }
                Op::Sqrt => {
                    let two_out = self.scale(Var(i as u32), 2.0);
                    let da = self.div(w, two_out);
                    acc!(self, a, da);
                }
                Op::Max => {
                    if self.vals[a] >= self.vals[b] {
                        acc!(self, a, w);
                    } else {
                        acc!(self, b, w);
                    }
                }
                Op::Min => {
                    if self.vals[a] <= self.vals[b] {
                        acc!(self, a, w);
                    } else {
                        acc!(self, b, w);
                    }
                }
            }
        }

        wrt_adj
            .into_iter()
            .map(|slot| slot.unwrap_or_else(|| self.leaf(0.0)))
            .collect()
    }
}
