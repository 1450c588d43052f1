//! Dense operators on ordered sets of sites.
//!
//! Everything is real: the Hamiltonians handled here (σᶻσᶻ, σˣ and their
//! renormalized descendants under real disentanglers/isometries) are real
//! symmetric, so Hermitian means symmetric and unitary means orthogonal.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, eigh, max_abs, partial_trace_dims, strides};

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const DEFAULT_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub index: usize,
    pub dim: usize,
}

impl Site {
    pub fn new(index: usize, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Dimension(format!("site {index} has dimension {dim} < 2")));
        }
        Ok(Site { index, dim })
    }

    pub fn qubit(index: usize) -> Self {
        Site { index, dim: 2 }
    }
}

pub fn qubits(indices: impl IntoIterator<Item = usize>) -> Vec<Site> {
    indices.into_iter().map(Site::qubit).collect()
}

pub mod pauli {
    use nalgebra::DMatrix;

    pub fn id() -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }
    pub fn x() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
    }
    pub fn z() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])
    }
}

#[derive(Clone, Debug)]
pub struct Operator {
    support: Vec<Site>,
    matrix: DMatrix<f64>,
    hermitian: bool,
    positive: bool,
}

fn check_support(support: &[Site]) -> Result<usize> {
    let mut seen: Vec<usize> = support.iter().map(|s| s.index).collect();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Support("duplicate site label in support".into()));
    }
    if let Some(s) = support.iter().find(|s| s.dim < 2) {
        return Err(Error::Dimension(format!("site {} has dimension {}", s.index, s.dim)));
    }
    Ok(support.iter().map(|s| s.dim).product())
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = max_abs(m).max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > HERMITIAN_TOL * scale {
                return false;
            }
        }
    }
    true
}

impl Operator {
    /// Wraps a matrix; the Hermitian flag is set by inspection.
    pub fn new(support: Vec<Site>, matrix: DMatrix<f64>) -> Result<Self> {
        let dim = check_support(&support)?;
        if matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(Error::Dimension(format!(
                "matrix is {}x{}, support needs {dim}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let hermitian = is_symmetric(&matrix);
        Ok(Operator { support, matrix, hermitian, positive: false })
    }

    /// Wraps a matrix and verifies positivity from its spectrum.
    pub fn new_positive(support: Vec<Site>, matrix: DMatrix<f64>) -> Result<Self> {
        let mut op = Operator::new(support, matrix)?;
        if !op.hermitian {
            return Err(Error::Contract("positive operator must be Hermitian".into()));
        }
        let e = linalg::eigvalsh(&op.matrix)?;
        let scale = e.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if e.iter().any(|&x| x < -HERMITIAN_TOL * scale) {
            return Err(Error::Contract("operator has negative eigenvalues".into()));
        }
        op.positive = true;
        Ok(op)
    }

    /// Trusted constructor for states that are positive by construction.
    pub(crate) fn from_parts_checked(support: Vec<Site>, matrix: DMatrix<f64>) -> Result<Self> {
        let dim = check_support(&support)?;
        if matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(Error::Dimension(format!("matrix is {}x{}, support needs {dim}", matrix.nrows(), matrix.ncols())));
        }
        Ok(Operator { support, matrix, hermitian: true, positive: true })
    }

    /// Trusted constructor for results that are positive by construction.
    pub(crate) fn from_parts(support: Vec<Site>, matrix: DMatrix<f64>, positive: bool) -> Self {
        debug_assert_eq!(matrix.nrows(), support.iter().map(|s| s.dim).product::<usize>());
        Operator { support, matrix, hermitian: true, positive }
    }

    pub fn identity(support: Vec<Site>) -> Result<Self> {
        let dim = check_support(&support)?;
        Ok(Operator { support, matrix: DMatrix::identity(dim, dim), hermitian: true, positive: true })
    }

    pub fn zeros(support: Vec<Site>) -> Result<Self> {
        let dim = check_support(&support)?;
        Ok(Operator { support, matrix: DMatrix::zeros(dim, dim), hermitian: true, positive: true })
    }

    /// Maximally mixed state on the support.
    pub fn maximally_mixed(support: Vec<Site>) -> Result<Self> {
        let mut op = Operator::identity(support)?;
        let d = op.dim() as f64;
        op.matrix /= d;
        Ok(op)
    }

    pub fn support(&self) -> &[Site] {
        &self.support
    }
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    pub fn dims(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.dim).collect()
    }
    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }
    pub fn is_positive(&self) -> bool {
        self.positive
    }
    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
    pub fn indices(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.index).collect()
    }

    pub fn scaled(&self, a: f64) -> Operator {
        let positive = self.positive && a >= 0.0;
        Operator { support: self.support.clone(), matrix: &self.matrix * a, hermitian: self.hermitian, positive }
    }

    /// Unit-trace copy; fails on a trace that is not strictly positive.
    pub fn normalized(&self) -> Result<Operator> {
        let t = self.trace();
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Normalization(t));
        }
        Ok(self.scaled(1.0 / t))
    }

    /// Traceless part `A − Tr(A)/D · I`.
    pub fn traceless(&self) -> Operator {
        let d = self.dim();
        let shift = self.trace() / d as f64;
        let mut m = self.matrix.clone();
        for i in 0..d {
            m[(i, i)] -= shift;
        }
        Operator { support: self.support.clone(), matrix: m, hermitian: self.hermitian, positive: false }
    }

    /// Sum after embedding both operands on the canonical union.
    pub fn add(&self, other: &Operator) -> Result<Operator> {
        let target = union(&self.support, &other.support);
        let a = embed(self, &target)?;
        let b = embed(other, &target)?;
        Ok(Operator {
            support: target,
            matrix: a.matrix + b.matrix,
            hermitian: self.hermitian && other.hermitian,
            positive: self.positive && other.positive,
        })
    }

    /// `Tr(self · x)` with `x` embedded into this operator's support.
    pub fn expectation(&self, x: &Operator) -> Result<f64> {
        let xe = embed(x, &self.support)?;
        Ok(self.matrix.component_mul(&xe.matrix.transpose()).sum())
    }

    /// Spectral norm (largest absolute eigenvalue for Hermitian operators).
    pub fn norm(&self) -> Result<f64> {
        if self.hermitian {
            linalg::sym_norm(&self.matrix)
        } else {
            Ok(self.matrix.clone().svd(false, false).singular_values.max())
        }
    }

    /// Returns the same matrix on relabeled sites (dims must agree).
    pub fn relabel(&self, support: Vec<Site>) -> Result<Operator> {
        if support.len() != self.support.len() || support.iter().zip(&self.support).any(|(a, b)| a.dim != b.dim) {
            return Err(Error::Support("relabel must preserve site dimensions".into()));
        }
        check_support(&support)?;
        Ok(Operator { support, ..self.clone() })
    }

    /// Reorders tensor factors so the support is ascending in site index.
    pub fn canonical(&self) -> Result<Operator> {
        let mut target = self.support.clone();
        target.sort();
        embed(self, &target)
    }

    /// Mirror image: tensor factors reversed, support labels kept in place.
    pub fn reversed(&self) -> Operator {
        let dims = self.dims();
        let rev: Vec<usize> = dims.iter().rev().copied().collect();
        let perm = permutation_indices(&dims, &(0..dims.len()).rev().collect::<Vec<_>>());
        let d = self.dim();
        let m = DMatrix::from_fn(d, d, |r, c| self.matrix[(perm[r], perm[c])]);
        let support = self
            .support
            .iter()
            .zip(rev)
            .map(|(s, dim)| Site { index: s.index, dim })
            .collect();
        Operator { support, matrix: m, hermitian: self.hermitian, positive: self.positive }
    }
}

/// Canonical (ascending) union of two supports.
pub fn union(a: &[Site], b: &[Site]) -> Vec<Site> {
    let mut out: Vec<Site> = a.to_vec();
    for s in b {
        if !out.iter().any(|t| t.index == s.index) {
            out.push(*s);
        }
    }
    out.sort();
    out
}

/// For a reordering `order` of tensor factors, maps each new index to the old index.
fn permutation_indices(dims: &[usize], order: &[usize]) -> Vec<usize> {
    let new_dims: Vec<usize> = order.iter().map(|&k| dims[k]).collect();
    let old_strides = strides(dims);
    let new_strides = strides(&new_dims);
    let total: usize = dims.iter().product();
    (0..total)
        .map(|n| {
            order
                .iter()
                .enumerate()
                .map(|(pos, &k)| ((n / new_strides[pos]) % new_dims[pos]) * old_strides[k])
                .sum()
        })
        .collect()
}

/// `op ⊗ I` on `target`, with factors permuted into target order.
pub fn embed(op: &Operator, target: &[Site]) -> Result<Operator> {
    check_support(target)?;
    let mut pos = Vec::with_capacity(op.support.len());
    for s in &op.support {
        match target.iter().position(|t| t.index == s.index) {
            Some(p) if target[p].dim == s.dim => pos.push(p),
            Some(_) => return Err(Error::Dimension(format!("site {} has conflicting dimensions", s.index))),
            None => return Err(Error::Support(format!("target is missing site {}", s.index))),
        }
    }
    if pos.len() == target.len() && pos.iter().enumerate().all(|(i, &p)| i == p) {
        return Ok(op.clone());
    }
    let tdims: Vec<usize> = target.iter().map(|s| s.dim).collect();
    let tstr = strides(&tdims);
    let odims = op.dims();
    let ostr = strides(&odims);
    let rest: Vec<usize> = (0..target.len()).filter(|p| !pos.contains(p)).collect();
    let rdims: Vec<usize> = rest.iter().map(|&p| tdims[p]).collect();
    let rstr = strides(&rdims);
    let total: usize = tdims.iter().product();
    let nrest: usize = rdims.iter().product();
    let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nrest];
    for f in 0..total {
        let digit = |p: usize| (f / tstr[p]) % tdims[p];
        let sub: usize = pos.iter().enumerate().map(|(k, &p)| digit(p) * ostr[k]).sum();
        let r: usize = rest.iter().enumerate().map(|(k, &p)| digit(p) * rstr[k]).sum();
        groups[r].push((f, sub));
    }
    let mut m = DMatrix::zeros(total, total);
    for g in &groups {
        for &(fr, sr) in g {
            for &(fc, sc) in g {
                m[(fr, fc)] = op.matrix[(sr, sc)];
            }
        }
    }
    Ok(Operator { support: target.to_vec(), matrix: m, hermitian: op.hermitian, positive: op.positive })
}

fn require_hermitian(op: &Operator, what: &str) -> Result<()> {
    if !op.hermitian {
        return Err(Error::Contract(format!("{what} requires a Hermitian operator")));
    }
    Ok(())
}

/// `e^{−βH}` by eigendecomposition.
pub fn herm_exp(h: &Operator, beta: f64) -> Result<Operator> {
    require_hermitian(h, "herm_exp")?;
    let e = eigh(&h.matrix)?;
    Ok(Operator::from_parts(h.support.clone(), e.map(|x| (-beta * x).exp()), true))
}

/// Unit-trace `e^{−βH}/Z` together with `ln Z`, stable for any β.
pub fn herm_exp_normalized(h: &Operator, beta: f64) -> Result<(Operator, f64)> {
    require_hermitian(h, "herm_exp_normalized")?;
    let (m, log_z) = linalg::exp_normalized_matrix_into(h.matrix.scale(-beta))?;
    Ok((Operator::from_parts(h.support.clone(), m, true), log_z))
}


/// How sub-floor eigenvalues are treated by [`herm_log`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogFloor {
    /// Raise eigenvalues below `rel·λ_max` to that floor.
    Clamp(f64),
    /// Send eigenvalues below `rel·λ_max` to `ln(floor) − penalty`, which
    /// effectively projects them out once the log is exponentiated again.
    Project { rel: f64, penalty: f64 },
    /// No floor; a non-positive eigenvalue is an error.
    Disabled,
}

impl Default for LogFloor {
    fn default() -> Self {
        LogFloor::Clamp(DEFAULT_FLOOR)
    }
}

pub fn log_matrix(a: &DMatrix<f64>, floor: LogFloor) -> Result<DMatrix<f64>> {
    let e = eigh(a)?;
    let top = e.max();
    if !(top > 0.0) {
        return Err(Error::Singular("operator has no positive eigenvalue".into()));
    }
    match floor {
        LogFloor::Clamp(rel) => {
            let f = rel * top;
            Ok(e.map(|v| v.max(f).ln()))
        }
        LogFloor::Project { rel, penalty } => {
            let f = rel * top;
            let low = f.ln() - penalty;
            Ok(e.map(|v| if v < f { low } else { v.ln() }))
        }
        LogFloor::Disabled => {
            if e.min() <= 0.0 {
                return Err(Error::Singular(format!("minimum eigenvalue {:e} is not positive", e.min())));
            }
            Ok(e.map(f64::ln))
        }
    }
}

/// Principal logarithm of a positive operator.
pub fn herm_log(a: &Operator, floor: LogFloor) -> Result<Operator> {
    require_hermitian(a, "herm_log")?;
    Ok(Operator::from_parts(a.support.clone(), log_matrix(&a.matrix, floor)?, false))
}

/// `exp(log A + log B)` on the canonical union of supports.
pub fn odot(a: &Operator, b: &Operator) -> Result<Operator> {
    odot_many(&[a, b])
}

pub fn odot_many(ops: &[&Operator]) -> Result<Operator> {
    if ops.is_empty() {
        return Err(Error::Arity("odot of zero operators".into()));
    }
    let mut target: Vec<Site> = Vec::new();
    for op in ops {
        if !op.positive {
            return Err(Error::Contract("odot requires positive operands".into()));
        }
        target = union(&target, &op.support);
    }
    let d: usize = target.iter().map(|s| s.dim).product();
    let mut sum = DMatrix::zeros(d, d);
    for op in ops {
        let l = herm_log(op, LogFloor::default())?;
        sum += embed(&l, &target)?.matrix;
    }
    let e = eigh(&sum)?;
    Ok(Operator::from_parts(target, e.map(f64::exp), true))
}

pub fn partial_trace(a: &Operator, traced: &[usize], normalized: bool) -> Result<Operator> {
    for t in traced {
        if !a.support.iter().any(|s| s.index == *t) {
            return Err(Error::Support(format!("site {t} is not in the support")));
        }
    }
    let keep: Vec<bool> = a.support.iter().map(|s| !traced.contains(&s.index)).collect();
    let mut m = partial_trace_dims(&a.matrix, &a.dims(), &keep);
    if normalized {
        let factor: usize = a.support.iter().filter(|s| traced.contains(&s.index)).map(|s| s.dim).product();
        m /= factor as f64;
    }
    let support = a.support.iter().zip(&keep).filter(|(_, k)| **k).map(|(s, _)| *s).collect();
    Ok(Operator { support, matrix: m, hermitian: a.hermitian, positive: a.positive })
}

/// Reduced operator on the listed sites (complement traced, unnormalized).
pub fn reduce_to(a: &Operator, keep: &[usize]) -> Result<Operator> {
    for k in keep {
        if !a.support.iter().any(|s| s.index == *k) {
            return Err(Error::Support(format!("site {k} is not in the support")));
        }
    }
    let traced: Vec<usize> = a.support.iter().map(|s| s.index).filter(|i| !keep.contains(i)).collect();
    partial_trace(a, &traced, false)
}

#[derive(Clone, Debug)]
pub struct CumulantSeries {
    pub cumulants: Vec<Operator>,
    pub norms: Vec<f64>,
}

impl CumulantSeries {
    pub fn len(&self) -> usize {
        self.cumulants.len()
    }
    pub fn is_empty(&self) -> bool {
        self.cumulants.is_empty()
    }
}

/// Splits `V` into pieces `V^j` on the first `j` sites of its support.
///
/// The support is read in its stored order, first site nearest the cut.
pub fn cumulant_decompose(v: &Operator) -> Result<CumulantSeries> {
    require_hermitian(v, "cumulant_decompose")?;
    let dims = v.dims();
    let n = dims.len();
    let mut rest = v.matrix.clone();
    let mut cumulants = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for j in 1..=n {
        let keep: Vec<bool> = (0..n).map(|k| k < j).collect();
        let tail: usize = dims[j..].iter().product();
        let vj = partial_trace_dims(&rest, &dims, &keep) / tail as f64;
        let vj = linalg::symmetrize(vj);
        rest -= linalg::kron(&vj, &DMatrix::identity(tail, tail));
        norms.push(linalg::sym_norm(&vj)?);
        cumulants.push(Operator::from_parts(v.support[..j].to_vec(), vj, false));
    }
    Ok(CumulantSeries { cumulants, norms })
}

/// Von Neumann entropy (natural log) of a positive operator.
pub fn entropy(rho: &Operator) -> Result<f64> {
    let e = linalg::eigvalsh(&rho.matrix)?;
    Ok(e.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum())
}

/// `I(a:c|b) = S(ab) + S(bc) − S(b) − S(abc)`, clamped below at zero.
pub fn conditional_mutual_information(rho: &Operator, a: &[usize], b: &[usize], c: &[usize]) -> Result<f64> {
    let t = rho.trace();
    if (t - 1.0).abs() > 1e-10 {
        return Err(Error::Normalization(t));
    }
    let mut all: Vec<usize> = a.iter().chain(b).chain(c).copied().collect();
    all.sort_unstable();
    let n_all = all.len();
    all.dedup();
    let mut sup = rho.indices();
    sup.sort_unstable();
    if all.len() != n_all || all != sup {
        return Err(Error::Support("a, b, c must be disjoint and cover the support".into()));
    }
    let s = |sites: Vec<usize>| -> Result<f64> {
        if sites.is_empty() {
            return Ok(0.0);
        }
        entropy(&reduce_to(rho, &sites)?)
    };
    let cat = |x: &[usize], y: &[usize]| x.iter().chain(y).copied().collect::<Vec<_>>();
    let i = s(cat(a, b))? + s(cat(b, c))? - s(b.to_vec())? - s(sup.clone())?;
    Ok(if i > -1e-9 { i.max(0.0) } else { i })
}

/// `½‖A − B‖₁` for operators on the same support.
pub fn trace_distance(a: &Operator, b: &Operator) -> Result<f64> {
    if a.indices() != b.indices() {
        return Err(Error::Support("trace distance needs identical supports".into()));
    }
    Ok(0.5 * linalg::trace_norm(&(&a.matrix - &b.matrix))?)
}
