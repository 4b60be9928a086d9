//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a Wengert list: every node stores its value, the primitive
//! that produced it, the indices of its operands and the numeric local
//! partials evaluated at record time. Operands always precede the node, so the
//! tape is topologically ordered by construction.
//!
//! Two reverse passes are provided:
//!
//! - [`Tape::backward`] accumulates numeric adjoints and returns the gradient
//!   of a seed node with respect to every input slot.
//! - [`Tape::extend_with_gradient`] re-records the reverse pass as new nodes on
//!   the same tape. The resulting derivative nodes are ordinary tape nodes, so
//!   a later [`Tape::backward`] over an expression that uses them yields
//!   second-order derivatives (double backprop).
//!
//! All arithmetic is `f64`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value {value} produced by {op:?} at node {node}")]
    NonFinite { node: usize, op: Op, value: f64 },
    #[error("primitive {op:?} at node {node} has no recordable derivative")]
    UnsupportedPrimitive { node: usize, op: Op },
    #[error("node {0} is not an input slot")]
    NotAnInput(usize),
    #[error("node {node} is out of range for a tape of {len} nodes")]
    OutOfRange { node: usize, len: usize },
    #[error("replay expected {expected} input values, got {found}")]
    InputCount { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Primitive that produced a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Independent variable registered in input slot `slot`.
    Input {
        slot: u32,
    },
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sin,
    Cos,
    /// `max(0, u)`; the subgradient at exactly zero is 0.
    Max0,
    /// Heaviside step `1[u > 0]`, the derivative of [`Op::Max0`].
    Step,
    /// n-ary sum.
    Sum,
    /// Inner product; operands are `[a_0..a_m, b_0..b_m]`.
    Dot,
    /// Externally supplied value and numeric partials. Differentiable once
    /// but not re-recordable.
    Opaque,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    value: f64,
    start: u32,
    len: u32,
}

/// Read-only view of one recorded node.
#[derive(Debug, Clone, Copy)]
pub struct TapeNode<'a> {
    pub op: Op,
    pub value: f64,
    pub parents: &'a [u32],
    pub local_partials: &'a [f64],
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    input_slots: Vec<u32>,
    first_non_finite: Option<usize>,
}

/// Records an expression and returns the tape with its output node.
///
/// Fails if any intermediate value is non-finite.
pub fn record<F>(build: F) -> Result<(Tape, Var)>
where
    F: FnOnce(&mut Tape) -> Var,
{
    let mut tape = Tape::new();
    let out = build(&mut tape);
    tape.check_finite()?;
    Ok((tape, out))
}

fn stable_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(nodes),
            parents: Vec::with_capacity(2 * nodes),
            partials: Vec::with_capacity(2 * nodes),
            input_slots: Vec::new(),
            first_non_finite: None,
        }
    }

    /// Empties the tape while keeping its allocations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.parents.clear();
        self.partials.clear();
        self.input_slots.clear();
        self.first_non_finite = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_inputs(&self) -> usize {
        self.input_slots.len()
    }

    /// Node holding input slot `slot`.
    pub fn input_var(&self, slot: usize) -> Var {
        Var(self.input_slots[slot])
    }

    /// Input slot of `v`, if it is an input node.
    pub fn slot_of(&self, v: Var) -> Option<usize> {
        match self.nodes.get(v.index())?.op {
            Op::Input { slot } => Some(slot as usize),
            _ => None,
        }
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.index()].value
    }

    pub fn node(&self, v: Var) -> TapeNode<'_> {
        let n = &self.nodes[v.index()];
        let range = n.start as usize..(n.start + n.len) as usize;
        TapeNode {
            op: n.op,
            value: n.value,
            parents: &self.parents[range.clone()],
            local_partials: &self.partials[range],
        }
    }

    /// Errors with the first node whose value was non-finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some(node) => Err(AutodiffError::NonFinite {
                node,
                op: self.nodes[node].op,
                value: self.nodes[node].value,
            }),
        }
    }

    fn push(&mut self, op: Op, value: f64, operands: &[(Var, f64)]) -> Var {
        let idx = self.nodes.len();
        let start = self.parents.len() as u32;
        for &(p, d) in operands {
            debug_assert!(p.index() < idx);
            self.parents.push(p.0);
            self.partials.push(d);
        }
        if !value.is_finite() && self.first_non_finite.is_none() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            op,
            value,
            start,
            len: operands.len() as u32,
        });
        Var(idx as u32)
    }

    pub fn input(&mut self, value: f64) -> Var {
        let slot = self.input_slots.len() as u32;
        let v = self.push(Op::Input { slot }, value, &[]);
        self.input_slots.push(v.0);
        v
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Op::Const, value, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add, v, &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub, v, &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(Op::Mul, x * y, &[(a, y), (b, x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let q = x / y;
        self.push(Op::Div, q, &[(a, 1.0 / y), (b, -q / y)])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(Op::Neg, v, &[(a, -1.0)])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).tanh();
        self.push(Op::Tanh, y, &[(a, 1.0 - y * y)])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = stable_sigmoid(self.value(a));
        self.push(Op::Sigmoid, y, &[(a, y * (1.0 - y))])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let u = self.value(a);
        self.push(Op::Softplus, stable_softplus(u), &[(a, stable_sigmoid(u))])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).exp();
        self.push(Op::Exp, y, &[(a, y)])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let u = self.value(a);
        self.push(Op::Log, u.ln(), &[(a, 1.0 / u)])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let u = self.value(a);
        self.push(Op::Sin, u.sin(), &[(a, u.cos())])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let u = self.value(a);
        self.push(Op::Cos, u.cos(), &[(a, -u.sin())])
    }

    pub fn max0(&mut self, a: Var) -> Var {
        let u = self.value(a);
        let (y, d) = if u > 0.0 { (u, 1.0) } else { (0.0, 0.0) };
        self.push(Op::Max0, y, &[(a, d)])
    }

    pub fn step(&mut self, a: Var) -> Var {
        let y = if self.value(a) > 0.0 { 1.0 } else { 0.0 };
        self.push(Op::Step, y, &[(a, 0.0)])
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let mut acc = 0.0;
        for &t in terms {
            acc += self.value(t);
        }
        let idx = self.nodes.len();
        let start = self.parents.len() as u32;
        for &t in terms {
            self.parents.push(t.0);
            self.partials.push(1.0);
        }
        self.finish_nary(Op::Sum, acc, idx, start, terms.len())
    }

    /// `Σ a_i b_i`, accumulated left to right.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot operands must have equal length");
        let mut acc = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            acc += self.value(x) * self.value(y);
        }
        let idx = self.nodes.len();
        let start = self.parents.len() as u32;
        for (&x, &y) in a.iter().zip(b) {
            self.parents.push(x.0);
            self.partials.push(self.nodes[y.index()].value);
        }
        for (&x, &y) in a.iter().zip(b) {
            self.parents.push(y.0);
            self.partials.push(self.nodes[x.index()].value);
        }
        self.finish_nary(Op::Dot, acc, idx, start, 2 * a.len())
    }

    fn finish_nary(&mut self, op: Op, value: f64, idx: usize, start: u32, len: usize) -> Var {
        if !value.is_finite() && self.first_non_finite.is_none() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            op,
            value,
            start,
            len: len as u32,
        });
        Var(idx as u32)
    }

    /// Records a node computed outside the tape from its operands' values.
    /// Such nodes support [`Tape::backward`] but not
    /// [`Tape::extend_with_gradient`] or [`Tape::replay`].
    pub fn opaque(&mut self, operands: &[Var], value: f64, local_partials: &[f64]) -> Var {
        assert_eq!(operands.len(), local_partials.len());
        let pairs: Vec<(Var, f64)> = operands
            .iter()
            .copied()
            .zip(local_partials.iter().copied())
            .collect();
        self.push(Op::Opaque, value, &pairs)
    }

    /// Gradient of `seed` with respect to every input slot, indexed by slot.
    /// Slots the seed does not depend on get 0.
    pub fn backward(&self, seed: Var) -> Result<Vec<f64>> {
        let mut adj = Vec::new();
        self.backward_into(seed, &mut adj)?;
        Ok(self
            .input_slots
            .iter()
            .map(|&n| adj.get(n as usize).copied().unwrap_or(0.0))
            .collect())
    }

    /// Reverse pass writing the adjoint of every node `<= seed` into `adj`.
    pub fn backward_into(&self, seed: Var, adj: &mut Vec<f64>) -> Result<()> {
        let s = seed.index();
        if s >= self.nodes.len() {
            return Err(AutodiffError::OutOfRange {
                node: s,
                len: self.nodes.len(),
            });
        }
        adj.clear();
        adj.resize(s + 1, 0.0);
        adj[s] = 1.0;
        for i in (0..=s).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = self.nodes[i];
            let range = n.start as usize..(n.start + n.len) as usize;
            for (&p, &d) in self.parents[range.clone()]
                .iter()
                .zip(&self.partials[range])
            {
                adj[p as usize] += a * d;
            }
        }
        if let Some((i, &v)) = adj.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(AutodiffError::NonFinite {
                node: i,
                op: self.nodes[i].op,
                value: v,
            });
        }
        Ok(())
    }

    /// Re-records the reverse pass from `seed` onto this tape and returns, for
    /// each entry of `wrt` (which must be input nodes), a node holding
    /// `∂seed/∂wrt`. Only nodes that depend on some `wrt` input are
    /// differentiated, so the cost scales with that sub-graph.
    pub fn extend_with_gradient(&mut self, seed: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let s = seed.index();
        if s >= self.nodes.len() {
            return Err(AutodiffError::OutOfRange {
                node: s,
                len: self.nodes.len(),
            });
        }
        for &w in wrt {
            if self.slot_of(w).is_none() {
                return Err(AutodiffError::NotAnInput(w.index()));
            }
        }
        let lo = match wrt.iter().map(|w| w.index()).min() {
            Some(lo) if lo <= s => lo,
            _ => {
                let zero = self.constant(0.0);
                return Ok(vec![zero; wrt.len()]);
            }
        };

        let span = s - lo + 1;
        let mut reach = vec![false; span];
        for &w in wrt {
            if w.index() <= s {
                reach[w.index() - lo] = true;
            }
        }
        for i in lo + 1..=s {
            let n = self.nodes[i];
            let range = n.start as usize..(n.start + n.len) as usize;
            reach[i - lo] = reach[i - lo]
                || self.parents[range]
                    .iter()
                    .any(|&p| p as usize >= lo && reach[p as usize - lo]);
        }

        let mut adj: Vec<Option<Var>> = vec![None; span];
        if reach[s - lo] {
            let one = self.constant(1.0);
            adj[s - lo] = Some(one);
            let mut ctx = Reverse {
                lo,
                reach: &reach,
                adj: &mut adj,
                one,
            };
            for i in (lo..=s).rev() {
                if !ctx.reach[i - lo] {
                    continue;
                }
                let Some(a) = ctx.adj[i - lo] else { continue };
                self.propagate(i, a, &mut ctx)?;
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        let mut zero = None;
        for &w in wrt {
            let g = if w.index() <= s {
                adj[w.index() - lo]
            } else {
                None
            };
            out.push(match g {
                Some(g) => g,
                None => *zero.get_or_insert_with(|| self.constant(0.0)),
            });
        }
        Ok(out)
    }

    fn propagate(&mut self, i: usize, a: Var, ctx: &mut Reverse<'_>) -> Result<()> {
        let n = self.nodes[i];
        let start = n.start as usize;
        let len = n.len as usize;
        let parent = |tape: &Tape, j: usize| Var(tape.parents[start + j]);
        let me = Var(i as u32);
        match n.op {
            Op::Input { .. } | Op::Const | Op::Step => {}
            Op::Add | Op::Sum => {
                for j in 0..len {
                    let p = parent(self, j);
                    self.contribute(ctx, p, a);
                }
            }
            Op::Sub => {
                let (p, q) = (parent(self, 0), parent(self, 1));
                self.contribute(ctx, p, a);
                if ctx.wants(q) {
                    let c = self.neg(a);
                    self.contribute(ctx, q, c);
                }
            }
            Op::Neg => {
                let p = parent(self, 0);
                if ctx.wants(p) {
                    let c = self.neg(a);
                    self.contribute(ctx, p, c);
                }
            }
            Op::Mul => {
                let (p, q) = (parent(self, 0), parent(self, 1));
                if ctx.wants(p) {
                    let c = self.scaled(ctx, a, q);
                    self.contribute(ctx, p, c);
                }
                if ctx.wants(q) {
                    let c = self.scaled(ctx, a, p);
                    self.contribute(ctx, q, c);
                }
            }
            Op::Dot => {
                let m = len / 2;
                for j in 0..m {
                    let (x, y) = (parent(self, j), parent(self, m + j));
                    if ctx.wants(x) {
                        let c = self.scaled(ctx, a, y);
                        self.contribute(ctx, x, c);
                    }
                    if ctx.wants(y) {
                        let c = self.scaled(ctx, a, x);
                        self.contribute(ctx, y, c);
                    }
                }
            }
            Op::Div => {
                let (p, q) = (parent(self, 0), parent(self, 1));
                if ctx.wants(p) {
                    let c = self.div(a, q);
                    self.contribute(ctx, p, c);
                }
                if ctx.wants(q) {
                    // -a * y / q
                    let t = self.scaled(ctx, a, me);
                    let t = self.div(t, q);
                    let c = self.neg(t);
                    self.contribute(ctx, q, c);
                }
            }
            Op::Tanh => {
                let p = parent(self, 0);
                let sq = self.mul(me, me);
                let one = self.constant(1.0);
                let d = self.sub(one, sq);
                let c = self.scaled(ctx, a, d);
                self.contribute(ctx, p, c);
            }
            Op::Sigmoid => {
                let p = parent(self, 0);
                let one = self.constant(1.0);
                let comp = self.sub(one, me);
                let d = self.mul(me, comp);
                let c = self.scaled(ctx, a, d);
                self.contribute(ctx, p, c);
            }
            Op::Softplus => {
                let p = parent(self, 0);
                let d = self.sigmoid(p);
                let c = self.scaled(ctx, a, d);
                self.contribute(ctx, p, c);
            }
            Op::Exp => {
                let p = parent(self, 0);
                let c = self.scaled(ctx, a, me);
                self.contribute(ctx, p, c);
            }
            Op::Log => {
                let p = parent(self, 0);
                let c = self.div(a, p);
                self.contribute(ctx, p, c);
            }
            Op::Sin => {
                let p = parent(self, 0);
                let d = self.cos(p);
                let c = self.scaled(ctx, a, d);
                self.contribute(ctx, p, c);
            }
            Op::Cos => {
                let p = parent(self, 0);
                let s = self.sin(p);
                let d = self.neg(s);
                let c = self.scaled(ctx, a, d);
                self.contribute(ctx, p, c);
            }
            Op::Max0 => {
                let p = parent(self, 0);
                let d = self.step(p);
                let c = self.scaled(ctx, a, d);
                self.contribute(ctx, p, c);
            }
            Op::Opaque => {
                return Err(AutodiffError::UnsupportedPrimitive { node: i, op: n.op });
            }
        }
        Ok(())
    }

    fn scaled(&mut self, ctx: &Reverse<'_>, adj: Var, factor: Var) -> Var {
        if adj == ctx.one {
            factor
        } else {
            self.mul(adj, factor)
        }
    }

    fn contribute(&mut self, ctx: &mut Reverse<'_>, target: Var, c: Var) {
        if !ctx.wants(target) {
            return;
        }
        let slot = &mut ctx.adj[target.index() - ctx.lo];
        *slot = Some(match *slot {
            None => c,
            Some(prev) => self.add(prev, c),
        });
    }

    /// Copies this tape and appends the re-recorded reverse pass of `seed`
    /// with respect to every input slot.
    pub fn backward_as_graph(&self, seed: Var) -> Result<GradientGraph> {
        let mut tape = self.clone();
        let wrt: Vec<Var> = self.input_slots.iter().map(|&n| Var(n)).collect();
        let derivatives = tape.extend_with_gradient(seed, &wrt)?;
        tape.check_finite()?;
        Ok(GradientGraph { tape, derivatives })
    }

    /// Re-evaluates every node from new input values, in tape order.
    pub fn replay(&mut self, inputs: &[f64]) -> Result<()> {
        if inputs.len() != self.input_slots.len() {
            return Err(AutodiffError::InputCount {
                expected: self.input_slots.len(),
                found: inputs.len(),
            });
        }
        self.first_non_finite = None;
        for i in 0..self.nodes.len() {
            let n = self.nodes[i];
            let start = n.start as usize;
            let len = n.len as usize;
            let pv = |tape: &Tape, j: usize| tape.nodes[tape.parents[start + j] as usize].value;
            let (value, partials): (f64, [f64; 2]) = match n.op {
                Op::Input { slot } => (inputs[slot as usize], [0.0; 2]),
                Op::Const => (n.value, [0.0; 2]),
                Op::Add => (pv(self, 0) + pv(self, 1), [1.0, 1.0]),
                Op::Sub => (pv(self, 0) - pv(self, 1), [1.0, -1.0]),
                Op::Mul => {
                    let (x, y) = (pv(self, 0), pv(self, 1));
                    (x * y, [y, x])
                }
                Op::Div => {
                    let (x, y) = (pv(self, 0), pv(self, 1));
                    let q = x / y;
                    (q, [1.0 / y, -q / y])
                }
                Op::Neg => (-pv(self, 0), [-1.0, 0.0]),
                Op::Tanh => {
                    let y = pv(self, 0).tanh();
                    (y, [1.0 - y * y, 0.0])
                }
                Op::Sigmoid => {
                    let y = stable_sigmoid(pv(self, 0));
                    (y, [y * (1.0 - y), 0.0])
                }
                Op::Softplus => {
                    let u = pv(self, 0);
                    (stable_softplus(u), [stable_sigmoid(u), 0.0])
                }
                Op::Exp => {
                    let y = pv(self, 0).exp();
                    (y, [y, 0.0])
                }
                Op::Log => {
                    let u = pv(self, 0);
                    (u.ln(), [1.0 / u, 0.0])
                }
                Op::Sin => {
                    let u = pv(self, 0);
                    (u.sin(), [u.cos(), 0.0])
                }
                Op::Cos => {
                    let u = pv(self, 0);
                    (u.cos(), [-u.sin(), 0.0])
                }
                Op::Max0 => {
                    let u = pv(self, 0);
                    if u > 0.0 {
                        (u, [1.0, 0.0])
                    } else {
                        (0.0, [0.0, 0.0])
                    }
                }
                Op::Step => (if pv(self, 0) > 0.0 { 1.0 } else { 0.0 }, [0.0; 2]),
                Op::Sum => {
                    let mut acc = 0.0;
                    for j in 0..len {
                        acc += pv(self, j);
                    }
                    (acc, [1.0; 2])
                }
                Op::Dot => {
                    let m = len / 2;
                    let mut acc = 0.0;
                    for j in 0..m {
                        let (x, y) = (pv(self, j), pv(self, m + j));
                        acc += x * y;
                        self.partials[start + j] = y;
                        self.partials[start + m + j] = x;
                    }
                    self.nodes[i].value = acc;
                    if !acc.is_finite() && self.first_non_finite.is_none() {
                        self.first_non_finite = Some(i);
                    }
                    continue;
                }
                Op::Opaque => {
                    return Err(AutodiffError::UnsupportedPrimitive { node: i, op: n.op });
                }
            };
            self.nodes[i].value = value;
            if !matches!(n.op, Op::Sum) {
                self.partials[start..start + len].copy_from_slice(&partials[..len]);
            }
            if !value.is_finite() && self.first_non_finite.is_none() {
                self.first_non_finite = Some(i);
            }
        }
        self.check_finite()
    }
}

struct Reverse<'a> {
    lo: usize,
    reach: &'a [bool],
    adj: &'a mut [Option<Var>],
    one: Var,
}

impl Reverse<'_> {
    fn wants(&self, v: Var) -> bool {
        let i = v.index();
        i >= self.lo && self.reach[i - self.lo]
    }
}

/// A tape extended with derivative nodes; `derivatives[slot]` holds the first
/// derivative with respect to input slot `slot`.
#[derive(Debug, Clone)]
pub struct GradientGraph {
    pub tape: Tape,
    pub derivatives: Vec<Var>,
}
