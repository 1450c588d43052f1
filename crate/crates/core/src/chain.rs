//! Sliding-window quantum belief propagation on chains.
//!
//! A message is a positive operator on `l` consecutive sites. One update
//! ⊙-multiplies it with the Boltzmann factor of the next bond and traces out
//! the leftmost site. On a translation-invariant chain the update is
//! iterated to a fixed point; on a finite chain two sweeps (left and right)
//! produce a message for every window.
//!
//! Messages already contain the bare Boltzmann factors of their own window,
//! so a two-sided belief is `exp(log m_L + log m_R + βH_W)`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, eigh, exp_normalized_matrix_into, kron, partial_trace_dims};
use crate::models::{Geometry, InteractionGraph};
use crate::operator::{
    cumulant_decompose, log_matrix, pauli, CumulantSeries, LogFloor, Operator, Site, DEFAULT_FLOOR,
};

/// Penalty that removes sub-floor directions from a belief.
pub const BELIEF_PENALTY: f64 = 200.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpConfig {
    /// Window size in sites.
    pub l: usize,
    pub beta: f64,
    /// Trace-distance tolerance between successive messages.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative eigenvalue floor of the log in the message update.
    pub message_floor: f64,
    /// Relative floor below which belief directions are projected out.
    pub belief_floor: f64,
    /// Mixing weight of a second, damped pass run only when the plain
    /// iteration does not converge within `max_iter`.
    pub fallback_damping: Option<f64>,
}

impl BpConfig {
    pub fn new(l: usize, beta: f64) -> Result<Self> {
        let c = BpConfig {
            l,
            beta,
            tol: 1e-12,
            max_iter: 500,
            message_floor: DEFAULT_FLOOR,
            belief_floor: DEFAULT_FLOOR,
            fallback_damping: Some(0.3),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::Size(format!("window size {} < 2", self.l)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Contract(format!("inverse temperature {} must be positive", self.beta)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Contract("tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Contract("max_iter must be positive".into()));
        }
        if let Some(a) = self.fallback_damping {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Contract(format!("fallback damping {a} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    fn msg_floor(&self) -> LogFloor {
        LogFloor::Clamp(self.message_floor)
    }

    fn bel_floor(&self) -> LogFloor {
        LogFloor::Project { rel: self.belief_floor, penalty: BELIEF_PENALTY }
    }
}

/// Unit-trace positive operator on a window plus its accumulated log-normalization.
#[derive(Clone, Debug)]
pub struct Message {
    pub op: Operator,
    pub log_norm: f64,
    /// Exact logarithm of `op`, known when the message was never traced.
    log: Option<DMatrix<f64>>,
}

impl Message {
    pub fn new(op: Operator, log_norm: f64) -> Self {
        Message { op, log_norm, log: None }
    }

    pub fn window(&self) -> &[Site] {
        self.op.support()
    }

    /// Maximally mixed message on `window`.
    pub fn uniform(window: Vec<Site>) -> Result<Self> {
        Ok(Message::new(Operator::maximally_mixed(window)?, 0.0))
    }

    /// Normalized `e^{−βh}` on the two sites of an edge.
    pub fn from_edge(h: &Operator, beta: f64) -> Result<Self> {
        let x = h.matrix() * -beta;
        let (m, lz) = exp_normalized_matrix_into(x.clone())?;
        let log = shifted(x, lz);
        Ok(Message { op: Operator::from_parts_checked(h.support().to_vec(), m)?, log_norm: lz, log: Some(log) })
    }

    fn log_with(&self, floor: LogFloor) -> Result<DMatrix<f64>> {
        match &self.log {
            Some(l) => Ok(l.clone()),
            None => log_matrix(self.op.matrix(), floor),
        }
    }
}

fn shifted(mut x: DMatrix<f64>, c: f64) -> DMatrix<f64> {
    for i in 0..x.nrows() {
        x[(i, i)] -= c;
    }
    x
}

/// Sum of the template `h` over the `n − 1` bonds of `n` sites of dimension `d`.
pub fn window_hamiltonian(h: &DMatrix<f64>, d: usize, n: usize) -> DMatrix<f64> {
    let dim = d.pow(n as u32);
    let mut hw = DMatrix::zeros(dim, dim);
    for i in 0..n.saturating_sub(1) {
        hw += bond_operator(h, d, n, i);
    }
    hw
}

/// Template `h` on bond `(i, i+1)` of an `n`-site window.
pub fn bond_operator(h: &DMatrix<f64>, d: usize, n: usize, i: usize) -> DMatrix<f64> {
    let left = DMatrix::identity(d.pow(i as u32), d.pow(i as u32));
    let right = DMatrix::identity(d.pow((n - i - 2) as u32), d.pow((n - i - 2) as u32));
    kron(&kron(&left, h), &right)
}

/// Template with its two sites exchanged.
pub fn swap_sites(h: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    reverse_factors(h, d, 2)
}

/// Reverses the order of `n` tensor factors of dimension `d`.
pub fn reverse_factors(m: &DMatrix<f64>, d: usize, n: usize) -> DMatrix<f64> {
    let dim = m.nrows();
    let rev = |mut x: usize| {
        let mut y = 0;
        for _ in 0..n {
            y = y * d + x % d;
            x /= d;
        }
        y
    };
    let p: Vec<usize> = (0..dim).map(rev).collect();
    DMatrix::from_fn(dim, dim, |r, c| m[(p[r], p[c])])
}

fn trace_first(m: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let r = m.nrows() / d;
    let mut out = DMatrix::zeros(r, r);
    for i in 0..d {
        out += m.view((i * r, i * r), (r, r));
    }
    out
}

fn trace_last(m: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let r = m.nrows() / d;
    DMatrix::from_fn(r, r, |a, b| (0..d).map(|k| m[(a * d + k, b * d + k)]).sum())
}

/// One sliding-window step: `Tr_first(e^{−βh} ⊙ m)`, renormalized.
///
/// The edge must start at the last window site. While the window is shorter
/// than `l` the new site is appended without tracing, which is how messages
/// grow from the open end of a finite chain.
pub fn message_update(m_prev: &Message, h: &Operator, config: &BpConfig) -> Result<Message> {
    let win = m_prev.window();
    let [a, b] = match h.support() {
        [a, b] => [*a, *b],
        _ => return Err(Error::Arity("edge term must act on two sites".into())),
    };
    if win.last().map(|s| s.index) != Some(a.index) || win.iter().any(|s| s.index == b.index) {
        return Err(Error::Support(format!(
            "edge ({}, {}) does not extend the message window",
            a.index, b.index
        )));
    }
    let dim = m_prev.op.dim();
    let lm = m_prev.log_with(config.msg_floor())?;
    let mut x = kron(&lm, &DMatrix::identity(b.dim, b.dim));
    x -= kron(&DMatrix::identity(dim / a.dim, dim / a.dim), h.matrix()) * config.beta;
    let (mut m, log_tr) = exp_normalized_matrix_into(x.clone())?;
    let mut window: Vec<Site> = win.to_vec();
    window.push(b);
    let mut log = None;
    if window.len() > config.l {
        m = trace_first(&m, window[0].dim);
        window.remove(0);
    } else {
        log = Some(shifted(x, log_tr));
    }
    Ok(Message {
        op: Operator::from_parts_checked(window, linalg::symmetrize(m))?,
        log_norm: m_prev.log_norm + log_tr,
        log,
    })
}

/// Classical transfer step `m'(y) = Σ_x e^{−βh(x,y)} m(x)` for a diagonal edge.
pub fn classical_message_update(m: &[f64], h_diag: &DMatrix<f64>, beta: f64) -> Vec<f64> {
    let d = m.len();
    (0..d)
        .map(|y| (0..d).map(|x| (-beta * h_diag[(x * d + y, x * d + y)]).exp() * m[x]).sum())
        .collect()
}

#[derive(Clone, Debug)]
pub struct FixedPoint {
    pub message: Message,
    pub converged: bool,
    pub iterations: usize,
    /// Trace distance of the last step.
    pub delta: f64,
    /// `ln Tr` of the last unnormalized update, the free energy per bond times `−β`.
    pub log_growth: f64,
}

/// Iterations without halving the best step before the plain pass gives up.
const STALL_WINDOW: usize = 50;

/// Iterates the translation-invariant update from `start` (or the uniform message).
pub fn fixed_point_template(
    h: &DMatrix<f64>,
    d: usize,
    config: &BpConfig,
    start: Option<&DMatrix<f64>>,
) -> Result<FixedPoint> {
    config.validate()?;
    let l = config.l;
    let dim = d.pow(l as u32);
    if h.nrows() != d * d {
        return Err(Error::Dimension(format!("template is {}x{}, expected {}", h.nrows(), h.ncols(), d * d)));
    }
    let mut m = match start {
        Some(s) if s.nrows() == dim => s.clone(),
        Some(s) => {
            return Err(Error::Dimension(format!("warm start has dimension {}, expected {dim}", s.nrows())))
        }
        None => DMatrix::identity(dim, dim) / dim as f64,
    };
    let hb = kron(&DMatrix::identity(dim / d, dim / d), h) * (-config.beta);
    let id = DMatrix::identity(d, d);
    let mut delta = f64::INFINITY;
    let mut log_growth = 0.0;
    let mut log_norm = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    // Plain pass, then (if needed) a damped pass from where the first one stopped.
    let passes = [Some(1.0), config.fallback_damping];
    for alpha in passes.into_iter().flatten() {
        let budget = if alpha < 1.0 { 3 * config.max_iter } else { config.max_iter };
        let (mut best, mut since_best) = (f64::INFINITY, 0);
        for _ in 0..budget {
            iterations += 1;
            let mut x = kron(&log_matrix(&m, config.msg_floor())?, &id);
            x += &hb;
            let (big, lt) = exp_normalized_matrix_into(x)?;
            let mut next = linalg::symmetrize(trace_first(&big, d));
            if alpha < 1.0 {
                next = &m * (1.0 - alpha) + next * alpha;
            }
            delta = 0.5 * linalg::trace_norm(&(&next - &m))? / alpha;
            log_growth = lt;
            log_norm += lt;
            m = next;
            if !delta.is_finite() {
                return Err(Error::Numerical("message update produced non-finite values".into()));
            }
            if delta <= config.tol {
                converged = true;
                break;
            }
            if delta < 0.5 * best {
                (best, since_best) = (delta, 0);
            } else {
                since_best += 1;
            }
            // A pass that stopped contracting only burns time: hand the plain
            // one over to damping, and give up on a stalled damped one.
            let window = if alpha < 1.0 { 4 * STALL_WINDOW } else { STALL_WINDOW };
            if (alpha < 1.0 || config.fallback_damping.is_some()) && since_best >= window {
                break;
            }
        }
        if converged {
            break;
        }
    }
    let window = (0..l).map(|i| Site { index: i, dim: d }).collect();
    Ok(FixedPoint {
        message: Message::new(Operator::from_parts_checked(window, m)?, log_norm),
        converged,
        iterations,
        delta,
        log_growth,
    })
}

fn template_of(graph: &InteractionGraph) -> Result<(DMatrix<f64>, usize)> {
    if graph.geometry != Geometry::InfiniteChain || graph.edges.len() != 1 {
        return Err(Error::Contract("expected a translation-invariant chain template".into()));
    }
    let e = &graph.edges[0];
    if e.a.dim != e.b.dim {
        return Err(Error::Dimension("template sites must share a dimension".into()));
    }
    Ok((e.h.matrix().clone(), e.a.dim))
}

/// Left fixed-point message of an infinite chain.
pub fn fixed_point(graph: &InteractionGraph, config: &BpConfig) -> Result<FixedPoint> {
    let (h, d) = template_of(graph)?;
    fixed_point_template(&h, d, config, None)
}

/// `exp(log m_L + log m_R + βH_W)`, normalized, on the common window.
pub fn belief(m_left: &Message, m_right: &Message, window_h: &Operator, config: &BpConfig) -> Result<Operator> {
    let (wl, wr) = (m_left.op.indices(), m_right.op.indices());
    if wl != wr || window_h.indices() != wl {
        return Err(Error::Support("belief messages and window terms must share one window".into()));
    }
    let m = belief_from_logs(
        m_left.log_with(config.bel_floor())?,
        &m_right.log_with(config.bel_floor())?,
        window_h.matrix(),
        config,
    )?;
    Operator::from_parts_checked(m_left.window().to_vec(), m)
}

fn belief_matrix(
    ml: &DMatrix<f64>,
    mr: &DMatrix<f64>,
    hw: &DMatrix<f64>,
    config: &BpConfig,
) -> Result<DMatrix<f64>> {
    belief_from_logs(log_matrix(ml, config.bel_floor())?, &log_matrix(mr, config.bel_floor())?, hw, config)
}

fn belief_from_logs(mut x: DMatrix<f64>, lr: &DMatrix<f64>, hw: &DMatrix<f64>, config: &BpConfig) -> Result<DMatrix<f64>> {
    x += lr;
    x += hw * config.beta;
    Ok(exp_normalized_matrix_into(x)?.0)
}

/// `−(1/β) log m − H_W`, traceless.
pub fn effective_potential(m: &Message, window_h: &DMatrix<f64>, config: &BpConfig) -> Result<Operator> {
    let v = potential_matrix(m.op.matrix(), window_h, config)?;
    Ok(Operator::new(m.window().to_vec(), v)?.traceless())
}

fn potential_matrix(m: &DMatrix<f64>, hw: &DMatrix<f64>, config: &BpConfig) -> Result<DMatrix<f64>> {
    let mut v = log_matrix(m, config.msg_floor())? * (-1.0 / config.beta);
    v -= hw;
    let shift = v.trace() / v.nrows() as f64;
    for i in 0..v.nrows() {
        v[(i, i)] -= shift;
    }
    Ok(linalg::symmetrize(v))
}

/// Relative size below which a cumulant counts as exactly zero.
const ZERO_CUMULANT: f64 = 1e-13;

/// `⟨|V^j|⟩` in `belief` for the cumulant `V^j = cs.cumulants[j - 1]`.
///
/// The cumulant must sit on the leading sites of the belief window. Unlike the
/// spectral norm this ignores directions the belief gives no weight, such as
/// message eigenvalues that were clamped to the log floor.
pub fn weighted_cumulant_norm(cs: &CumulantSeries, j: usize, belief: &Operator) -> Result<f64> {
    let c = cs
        .cumulants
        .get(j.wrapping_sub(1))
        .ok_or_else(|| Error::Arity(format!("no cumulant of order {j}")))?;
    if c.support().len() != j || belief.support().len() < j || c.indices()[..] != belief.indices()[..j] {
        return Err(Error::Support("cumulant does not sit on the leading belief sites".into()));
    }
    let dims = belief.dims();
    let keep: Vec<bool> = (0..dims.len()).map(|k| k < j).collect();
    let red = partial_trace_dims(belief.matrix(), &dims, &keep);
    let abs = eigh(c.matrix())?.map(f64::abs);
    Ok(red.component_mul(&abs).sum())
}

/// `β ⟨|V^l|⟩² / ⟨|V^{l−1}|⟩` with expectations in `belief`.
///
/// The cumulants live on the leading sites of the belief window. The norm of
/// each cumulant replaces its expectation if the latter underflows.
pub fn error_estimate(cs: &CumulantSeries, beta: f64, belief: &Operator) -> Result<f64> {
    let n = cs.len();
    if n < 2 {
        return Err(Error::Arity("error estimate needs at least two cumulants".into()));
    }
    let abs_exp = |j: usize| weighted_cumulant_norm(cs, j + 1, belief);
    let scale = cs.norms.iter().fold(0.0_f64, |m, &x| m.max(x)).max(1.0);
    if cs.norms[n - 1] <= ZERO_CUMULANT * scale {
        return Ok(0.0);
    }
    let (mut num, mut den) = (abs_exp(n - 1)?, abs_exp(n - 2)?);
    if den < 1e-300 || num < 1e-300 {
        num = cs.norms[n - 1];
        den = cs.norms[n - 2];
    }
    if num <= 0.0 {
        return Ok(0.0);
    }
    if den < 1e-300 {
        return Ok(f64::INFINITY);
    }
    Ok(beta * num * num / den)
}

#[derive(Clone, Debug)]
pub struct BpResult {
    pub belief: Operator,
    pub observables: BTreeMap<String, f64>,
    pub error_estimate: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Left fixed point and the right one in its own (mirrored) frame.
    pub left: FixedPoint,
    pub right: FixedPoint,
    /// Spectral norms of the cumulants of the left effective potential.
    pub cumulant_norms: Vec<f64>,
    /// The same cumulants measured as `⟨|V^j|⟩` in the belief.
    pub weighted_norms: Vec<f64>,
}

impl BpResult {
    pub fn energy(&self) -> f64 {
        self.observables["energy"]
    }
}

/// Messages to start the next temperature from.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

impl BpResult {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart { left: self.left.message.op.matrix().clone(), right: self.right.message.op.matrix().clone() }
    }
}

fn is_reflection_symmetric(h: &DMatrix<f64>, d: usize) -> bool {
    (swap_sites(h, d) - h).abs().max() <= 1e-14 * linalg::max_abs(h).max(1.0)
}

/// Index of the bond on which observables are read.
pub fn middle_bond(l: usize) -> usize {
    (l - 2) / 2
}

/// Expectation of a two-site operator on the middle bond of a belief.
pub fn bond_expectation(belief: &Operator, op: &DMatrix<f64>, d: usize) -> f64 {
    let l = belief.support().len();
    let k = middle_bond(l);
    let keep: Vec<bool> = (0..l).map(|i| i == k || i == k + 1).collect();
    let red = partial_trace_dims(belief.matrix(), &vec![d; l], &keep);
    red.component_mul(op).sum()
}

/// Energy per bond and, for qubits, magnetizations and the zz correlator.
pub fn observables(belief: &Operator, h: &DMatrix<f64>, d: usize) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    out.insert("energy".to_string(), bond_expectation(belief, h, d));
    if d == 2 {
        let (x, z, i) = (pauli::x(), pauli::z(), pauli::id());
        out.insert("sz".to_string(), bond_expectation(belief, &kron(&z, &i), 2));
        out.insert("sx".to_string(), bond_expectation(belief, &kron(&x, &i), 2));
        out.insert("szz".to_string(), bond_expectation(belief, &kron(&z, &z), 2));
    }
    out
}

/// Full infinite-chain BP at one temperature.
pub fn run_infinite(h: &DMatrix<f64>, d: usize, config: &BpConfig, warm: Option<&WarmStart>) -> Result<BpResult> {
    let l = config.l;
    let hw = window_hamiltonian(h, d, l);
    let left = fixed_point_template(h, d, config, warm.map(|w| &w.left))?;
    let symmetric = is_reflection_symmetric(h, d);
    let right = if symmetric {
        left.clone()
    } else {
        fixed_point_template(&swap_sites(h, d), d, config, warm.map(|w| &w.right))?
    };
    let ml = left.message.op.matrix();
    let mr_frame = right.message.op.matrix();
    let mr = reverse_factors(mr_frame, d, l);
    let b = belief_matrix(ml, &mr, &hw, config)?;
    let window: Vec<Site> = (0..l).map(|i| Site { index: i, dim: d }).collect();
    let belief = Operator::from_parts_checked(window.clone(), b)?;

    let vl = Operator::new(window.clone(), potential_matrix(ml, &hw, config)?)?;
    let cl = cumulant_decompose(&vl)?;
    let mut est = error_estimate(&cl, config.beta, &belief)?;
    if symmetric {
        let mirrored = Operator::from_parts_checked(window.clone(), reverse_factors(belief.matrix(), d, l))?;
        est += error_estimate(&cl, config.beta, &mirrored)?;
    } else {
        let hw_r = window_hamiltonian(&swap_sites(h, d), d, l);
        let vr = Operator::new(window.clone(), potential_matrix(mr_frame, &hw_r, config)?)?;
        let cr = cumulant_decompose(&vr)?;
        let mirrored = Operator::from_parts_checked(window, reverse_factors(belief.matrix(), d, l))?;
        est += error_estimate(&cr, config.beta, &mirrored)?;
    }
    let weighted_norms = (1..=l).map(|j| weighted_cumulant_norm(&cl, j, &belief)).collect::<Result<_>>()?;
    Ok(BpResult {
        weighted_norms,
        observables: observables(&belief, h, d),
        belief,
        error_estimate: est,
        converged: left.converged && right.converged,
        iterations: left.iterations.max(right.iterations),
        cumulant_norms: cl.norms,
        left,
        right,
    })
}

/// Infinite-chain BP along a temperature grid.
///
/// Each point starts from the messages of the previous converged point, so a
/// descending grid follows the fixed point down in temperature.
pub fn temperature_sweep(
    h: &DMatrix<f64>,
    d: usize,
    l: usize,
    temperatures: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<BpResult>> {
    let mut out: Vec<BpResult> = Vec::with_capacity(temperatures.len());
    let mut warm: Option<WarmStart> = None;
    for &t in temperatures {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Contract(format!("temperature {t} must be positive and finite")));
        }
        let config = BpConfig::new(l, 1.0 / t)?.with_tol(tol).with_max_iter(max_iter);
        let r = run_infinite(h, d, &config, warm.as_ref())?;
        if r.converged {
            warm = Some(r.warm_start());
        }
        out.push(r);
    }
    Ok(out)
}

/// Window messages and beliefs of a finite open chain.
#[derive(Clone, Debug)]
pub struct FiniteChainResult {
    /// Effective window, `min(l, N)`.
    pub window: usize,
    pub log_z: f64,
    /// Belief of the window starting at site `s`, for `s = 0..=N−window`.
    pub beliefs: Vec<Operator>,
    /// `⟨h_{i,i+1}⟩` per bond.
    pub bond_energies: Vec<f64>,
    pub energy: f64,
    /// Single-site reduced states.
    pub one_site: Vec<Operator>,
    /// Reduced states on each bond.
    pub two_site: Vec<Operator>,
}

/// BP on a finite open chain by one left and one right sweep.
pub fn run_finite(graph: &InteractionGraph, config: &BpConfig) -> Result<FiniteChainResult> {
    config.validate()?;
    let n = match graph.geometry {
        Geometry::Chain { n } => n,
        _ => return Err(Error::Contract("finite-chain BP needs a chain graph".into())),
    };
    for (i, e) in graph.edges.iter().enumerate() {
        if e.a.index != graph.sites[i].index || e.b.index != graph.sites[i + 1].index {
            return Err(Error::Support("chain edges must follow site order".into()));
        }
    }
    let w = config.l.min(n);
    let sites = &graph.sites;
    let beta = config.beta;
    let dim_of = |range: std::ops::Range<usize>| sites[range].iter().map(|s| s.dim).product::<usize>();

    // left[b]: window ending at b, holding all bonds left of b.
    let mut left: Vec<Option<Message>> = vec![None; n];
    left[1] = Some(Message::from_edge(&graph.edges[0].h, beta)?);
    for b in 2..n {
        let prev = left[b - 1].as_ref().unwrap();
        left[b] = Some(message_update(prev, &graph.edges[b - 1].h, config)?);
    }

    // right[a]: window starting at a, holding all bonds right of a.
    let mut right: Vec<Option<Message>> = vec![None; n];
    right[n - 2] = Some(Message::from_edge(&graph.edges[n - 2].h, beta)?);
    for a in (0..n.saturating_sub(2)).rev() {
        let prev = right[a + 1].as_ref().unwrap();
        let len = prev.window().len();
        let da = sites[a].dim;
        let lm = prev.log_with(config.msg_floor())?;
        let mut x = kron(&DMatrix::identity(da, da), &lm);
        let rest = dim_of(a + 2..a + 1 + len);
        x -= kron(graph.edges[a].h.matrix(), &DMatrix::identity(rest, rest)) * beta;
        let (mut m, lt) = exp_normalized_matrix_into(x.clone())?;
        let mut window = sites[a..a + 1 + len].to_vec();
        let mut log = None;
        if window.len() > w {
            m = trace_last(&m, window.last().unwrap().dim);
            window.pop();
        } else {
            log = Some(shifted(x, lt));
        }
        right[a] = Some(Message {
            op: Operator::from_parts_checked(window, linalg::symmetrize(m))?,
            log_norm: prev.log_norm + lt,
            log,
        });
    }

    let window_h = |s: usize| -> Result<DMatrix<f64>> {
        let win = &sites[s..s + w];
        let dim = dim_of(s..s + w);
        let mut hw = DMatrix::zeros(dim, dim);
        for i in s..s + w - 1 {
            let (l, r) = (dim_of(s..i), dim_of(i + 2..s + w));
            hw += kron(&kron(&DMatrix::identity(l, l), graph.edges[i].h.matrix()), &DMatrix::identity(r, r));
        }
        debug_assert_eq!(win.len(), w);
        Ok(hw)
    };
    let mut beliefs = Vec::with_capacity(n - w + 1);
    for s in 0..=n - w {
        let ml = left[s + w - 1].as_ref().unwrap();
        let mr = right[s].as_ref().unwrap();
        debug_assert_eq!(ml.op.indices(), mr.op.indices());
        let b = belief_from_logs(ml.log_with(config.bel_floor())?, &mr.log_with(config.bel_floor())?, &window_h(s)?, config)?;
        beliefs.push(Operator::from_parts_checked(sites[s..s + w].to_vec(), b)?);
    }
    let pick = |i: usize, span: usize| (i.saturating_sub((w - span) / 2)).min(n - w);
    let reduce = |bel: &Operator, keep: &[usize]| -> Operator {
        let mask: Vec<bool> = bel.support().iter().map(|s| keep.contains(&s.index)).collect();
        let m = partial_trace_dims(bel.matrix(), &bel.dims(), &mask);
        let sup = bel.support().iter().filter(|s| keep.contains(&s.index)).copied().collect();
        Operator::from_parts(sup, m, true)
    };
    let mut two_site = Vec::with_capacity(n - 1);
    let mut bond_energies = Vec::with_capacity(n - 1);
    for (i, e) in graph.edges.iter().enumerate() {
        let r = reduce(&beliefs[pick(i, 2)], &[e.a.index, e.b.index]);
        bond_energies.push(r.matrix().component_mul(e.h.matrix()).sum());
        two_site.push(r);
    }
    let one_site = (0..n).map(|i| reduce(&beliefs[pick(i, 1)], &[sites[i].index])).collect();
    Ok(FiniteChainResult {
        window: w,
        log_z: left[n - 1].as_ref().unwrap().log_norm,
        energy: bond_energies.iter().sum(),
        beliefs,
        bond_energies,
        one_site,
        two_site,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{tfim_chain, tfim_template, ChainSize};
    use crate::operator::{embed, herm_exp, odot, partial_trace, qubits, trace_distance};
    use crate::oracle::{classical_enumerate, exact_thermal, jw_energy_density};

    fn cfg(l: usize, beta: f64) -> BpConfig {
        BpConfig::new(l, beta).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(BpConfig::new(1, 1.0).is_err());
        assert!(BpConfig::new(4, 0.0).is_err());
        let c = cfg(4, 1.0);
        assert_eq!((c.tol, c.max_iter), (1e-12, 500));
    }

    #[test]
    fn high_temperature_message_is_uniform() {
        let h = Operator::new(qubits([3, 4]), tfim_template(1.0)).unwrap();
        let c = cfg(4, 1e-12);
        let m2 = message_update(&Message::uniform(qubits(0..4)).unwrap(), &h, &c).unwrap();
        let want = DMatrix::identity(16, 16) / 16.0;
        assert!((m2.op.matrix() - want).abs().max() < 1e-11);
    }

    #[test]
    fn update_rejects_misaligned_edge() {
        let h = Operator::new(qubits([5, 6]), tfim_template(1.0)).unwrap();
        let m = Message::uniform(qubits(0..4)).unwrap();
        assert!(matches!(message_update(&m, &h, &cfg(4, 1.0)), Err(Error::Support(_))));
    }

    #[test]
    fn classical_update_is_transfer_matrix() {
        let h = tfim_template(0.0) + kron(&pauli::z(), &pauli::id()) * 0.3;
        let beta = 0.9;
        // Two-site window reduces to a one-site message after each step.
        let c = cfg(2, beta);
        let p0 = [0.4, 0.6];
        let m = Message::new(
            Operator::new_positive(qubits([0, 1]), DMatrix::from_diagonal(&nalgebra::dvector![0.7 * 0.4, 0.7 * 0.6, 0.3 * 0.4, 0.3 * 0.6])).unwrap(),
            0.0,
        );
        let hop = Operator::new(qubits([1, 2]), h.clone()).unwrap();
        let next = message_update(&m, &hop, &c).unwrap();
        let marg = partial_trace(&next.op, &[1], false).unwrap();
        let want = classical_message_update(&p0, &h, beta);
        let s: f64 = want.iter().sum();
        for y in 0..2 {
            assert!((marg.matrix()[(y, y)] - want[y] / s).abs() < 1e-14);
        }
        assert!(next.op.matrix().iter().enumerate().all(|(k, v)| k % 5 == 0 || v.abs() < 1e-15));
    }

    #[test]
    fn update_matches_primitive_composition() {
        let c = cfg(4, 1.0);
        let h = Operator::new(qubits([3, 4]), tfim_template(1.0)).unwrap();
        let m0 = Message::uniform(qubits(0..4)).unwrap();
        let got = message_update(&m0, &h, &c).unwrap();
        let prod = odot(&herm_exp(&h, 1.0).unwrap(), &m0.op).unwrap();
        let want = partial_trace(&prod, &[0], false).unwrap().normalized().unwrap();
        assert_eq!(got.op.indices(), vec![1, 2, 3, 4]);
        assert!(trace_distance(&got.op, &want).unwrap() < 1e-13);
        assert!((got.log_norm - prod.trace().ln()).abs() < 1e-12);
    }

    #[test]
    fn classical_symmetric_fixed_point() {
        let g = tfim_chain(0.0, ChainSize::Infinite).unwrap();
        for beta in [0.3, 1.0, 3.0] {
            let c = cfg(4, beta);
            let fp = fixed_point(&g, &c).unwrap();
            assert!(fp.converged);
            // Growth per bond is the transfer-matrix eigenvalue 2 cosh β.
            assert!((fp.log_growth - (2.0 * beta.cosh()).ln()).abs() < 1e-12);
            let r = run_infinite(&tfim_template(0.0), 2, &c, None).unwrap();
            assert!(r.observables["sz"].abs() < 1e-14);
            assert!((r.energy() + beta.tanh()).abs() < 1e-12);
            assert_eq!(r.error_estimate, 0.0);
        }
    }

    #[test]
    fn messages_stay_normalized_and_positive() {
        let c = cfg(5, 2.0);
        let h = tfim_template(1.0);
        let mut m = Message::uniform(qubits(0..5)).unwrap();
        for k in 0..6 {
            let hop = Operator::new(qubits([4 + k, 5 + k]), h.clone()).unwrap();
            m = message_update(&m, &hop, &c).unwrap();
            assert!((m.op.trace() - 1.0).abs() < 1e-10);
            assert!(linalg::eigvalsh(m.op.matrix()).unwrap().min() > -1e-12);
        }
    }

    #[test]
    fn infinite_temperature_belief() {
        let c = cfg(4, 1e-10);
        let r = run_infinite(&tfim_template(1.0), 2, &c, None).unwrap();
        assert!((r.belief.matrix() - DMatrix::identity(16, 16) / 16.0).abs().max() < 1e-9);
        assert!(r.energy().abs() < 1e-9);
        // As β → 0 the potential reduces to the half field that the cut
        // bond leaves on the first window site; everything else is O(β).
        let hw = window_hamiltonian(&tfim_template(1.0), 2, 4);
        let rest = |beta: f64| {
            let c = cfg(4, beta);
            let fp = fixed_point_template(&tfim_template(1.0), 2, &c, None).unwrap();
            let cs = cumulant_decompose(&effective_potential(&fp.message, &hw, &c).unwrap()).unwrap();
            let v1 = (cs.cumulants[0].matrix() - pauli::x() * 0.5).abs().max();
            v1.max(cs.norms[1..].iter().fold(0.0_f64, |m, &x| m.max(x)))
        };
        let (a, b) = (rest(1e-2), rest(1e-3));
        assert!(a < 0.05 && b < 0.15 * a, "{a} {b}");
    }

    #[test]
    fn critical_chain_at_unit_temperature() {
        let c = cfg(10, 1.0).with_tol(1e-11);
        let r = run_infinite(&tfim_template(1.0), 2, &c, None).unwrap();
        assert!(r.converged);
        let err = (r.energy() - jw_energy_density(1.0, 1.0)).abs();
        assert!(err < 1e-6, "err {err}");
        assert!(r.error_estimate >= err);
    }

    #[test]
    fn iteration_baseline() {
        // Frozen from the first verified run.
        let c = cfg(6, 2.0);
        let fp = fixed_point(&tfim_chain(1.0, ChainSize::Infinite).unwrap(), &c).unwrap();
        assert!(fp.converged);
        assert!((10..=40).contains(&fp.iterations), "{}", fp.iterations);
    }

    #[test]
    fn classical_belief_is_exact_marginal() {
        // Infinite classical chain with a field: transfer-matrix two-site marginal.
        let hf = 0.4;
        let h = tfim_template(0.0) + (kron(&pauli::z(), &pauli::id()) + kron(&pauli::id(), &pauli::z())) * (0.5 * hf);
        let beta = 0.8;
        let r = run_infinite(&h, 2, &cfg(4, beta), None).unwrap();
        let t = DMatrix::from_fn(2, 2, |a, b| (-beta * h[(2 * a + b, 2 * a + b)]).exp());
        let e = t.clone().symmetric_eigen();
        let k = e.eigenvalues.imax();
        let v = e.eigenvectors.column(k);
        let lam = e.eigenvalues[k];
        let k0 = middle_bond(4);
        let keep: Vec<bool> = (0..4).map(|i| i == k0 || i == k0 + 1).collect();
        let red = partial_trace_dims(r.belief.matrix(), &[2, 2, 2, 2], &keep);
        for a in 0..2 {
            for b in 0..2 {
                let p = v[a] * t[(a, b)] * v[b] / lam;
                assert!((red[(2 * a + b, 2 * a + b)] - p).abs() < 1e-12);
            }
        }
        assert_eq!(r.error_estimate, 0.0);
    }

    #[test]
    fn full_window_finite_chain_is_exact() {
        let g = tfim_chain(0.8, ChainSize::Finite(5)).unwrap();
        for beta in [0.1, 1.0, 5.0] {
            let ex = exact_thermal(&g, beta).unwrap();
            for l in [4, 5] {
                let r = run_finite(&g, &cfg(l, beta)).unwrap();
                assert!((r.energy - ex.energy().unwrap()).abs() < 1e-9, "l={l} beta={beta}");
                let full = embed(&ex.reduced(&r.beliefs[0].indices()).unwrap(), r.beliefs[0].support()).unwrap();
                assert!(trace_distance(&r.beliefs[0], &full).unwrap() < 1e-9);
            }
            let r = run_finite(&g, &cfg(5, beta)).unwrap();
            assert!((r.log_z - ex.log_z).abs() < 1e-9 * ex.log_z.abs().max(1.0));
        }
    }

    #[test]
    fn classical_finite_chain_is_exact() {
        let mut g = tfim_chain(0.0, ChainSize::Finite(9)).unwrap();
        // Add a non-uniform longitudinal field to make marginals nontrivial.
        for (i, e) in g.edges.iter_mut().enumerate() {
            let f = 0.1 * (i as f64 - 3.0);
            let m = e.h.matrix() + kron(&pauli::z(), &pauli::id()) * f;
            e.h = Operator::new(vec![e.a, e.b], m).unwrap();
        }
        let beta = 0.7;
        let cl = classical_enumerate(&g, beta).unwrap();
        for l in [2, 3, 5] {
            let r = run_finite(&g, &cfg(l, beta)).unwrap();
            assert!(((r.log_z - cl.log_z) / cl.log_z).abs() < 1e-12);
            for (i, p) in cl.one_site.iter().enumerate() {
                assert!((r.one_site[i].matrix()[(0, 0)] - p[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn b_half_matches_twelve_site_middle() {
        // Infinite-chain BP against the middle bond of a dense open chain.
        let beta = 2.0;
        let r = run_infinite(&tfim_template(0.5), 2, &cfg(6, beta), None).unwrap();
        let g = tfim_chain(0.5, ChainSize::Finite(10)).unwrap();
        let ex = exact_thermal(&g, beta).unwrap();
        let mid = Operator::new(qubits([4, 5]), tfim_template(0.5)).unwrap();
        let e_ed = ex.expectation(&mid).unwrap();
        assert!((r.energy() - e_ed).abs() < 1e-4, "{} vs {}", r.energy(), e_ed);
    }

    #[test]
    fn potential_of_classical_message_is_one_site() {
        let h = tfim_template(0.0) + kron(&pauli::z(), &pauli::id()) * 0.3;
        let c = cfg(4, 1.0);
        let fp = fixed_point_template(&h, 2, &c, None).unwrap();
        let v = effective_potential(&fp.message, &window_hamiltonian(&h, 2, 4), &c).unwrap();
        assert!(v.matrix().iter().enumerate().all(|(k, x)| k % 17 == 0 || x.abs() < 1e-14));
        let cs = cumulant_decompose(&v).unwrap();
        assert!(cs.norms[0] > 1e-3);
        assert!(cs.norms[1..].iter().all(|&x| x < 1e-13));
    }

    #[test]
    fn estimate_needs_two_cumulants() {
        let v = Operator::new(qubits([0]), pauli::z()).unwrap();
        let cs = cumulant_decompose(&v).unwrap();
        let b = Operator::maximally_mixed(qubits([0])).unwrap();
        assert!(matches!(error_estimate(&cs, 1.0, &b), Err(Error::Arity(_))));
    }

    #[test]
    fn weighted_norm_in_mixed_state_is_mean_absolute_eigenvalue() {
        let zz = kron(&pauli::z(), &pauli::z());
        let v = Operator::new(qubits([0, 1, 2]), kron(&(zz * 0.7), &pauli::x())).unwrap();
        let cs = cumulant_decompose(&v).unwrap();
        let mixed = Operator::maximally_mixed(qubits([0, 1, 2])).unwrap();
        assert!(weighted_cumulant_norm(&cs, 1, &mixed).unwrap().abs() < 1e-15);
        assert!(weighted_cumulant_norm(&cs, 2, &mixed).unwrap().abs() < 1e-15);
        assert!((weighted_cumulant_norm(&cs, 3, &mixed).unwrap() - 0.7).abs() < 1e-14);
        assert!(matches!(weighted_cumulant_norm(&cs, 0, &mixed), Err(Error::Arity(_))));
        let shifted = Operator::maximally_mixed(qubits([1, 2, 3])).unwrap();
        assert!(matches!(weighted_cumulant_norm(&cs, 2, &shifted), Err(Error::Support(_))));
    }
}
