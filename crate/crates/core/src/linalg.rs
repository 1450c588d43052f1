//! Dense real linear algebra helpers shared by every module.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Symmetric eigendecompositions are
//! delegated to `faer`, which is several times faster than nalgebra's QR
//! iteration at the 256..2048 sizes that dominate the message updates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigendecomposition of a real symmetric matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct Eigh {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl Eigh {
    /// Rebuilds `V f(Λ) Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let s = f(self.values[j]);
            scaled.column_mut(j).scale_mut(s);
        }
        let out = scaled * self.vectors.transpose();
        symmetrize(out)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn eigh(a: &DMatrix<f64>) -> Result<Eigh> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Dimension(format!("eigh of non-square {}x{} matrix", n, a.ncols())));
    }
    if n == 0 {
        return Ok(Eigh { values: DVector::zeros(0), vectors: DMatrix::zeros(0, 0) });
    }
    if n == 1 {
        return Ok(Eigh { values: DVector::from_element(1, a[(0, 0)]), vectors: DMatrix::identity(1, 1) });
    }
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut u = faer::Mat::<f64>::zeros(n, n);
    let mut s = faer::diag::Diag::<f64>::zeros(n);
    // Sequential on purpose: faer's rayon path rounds differently depending on
    // the pool size, which would make results depend on the worker count.
    let par = faer::Par::Seq;
    let req = faer::linalg::evd::self_adjoint_evd_scratch::<f64>(
        n,
        faer::linalg::evd::ComputeEigenvectors::Yes,
        par,
        Default::default(),
    );
    let mut buf = faer::dyn_stack::MemBuffer::new(req);
    faer::linalg::evd::self_adjoint_evd(
        m.as_ref(),
        s.as_mut(),
        Some(u.as_mut()),
        par,
        faer::dyn_stack::MemStack::new(&mut buf),
        Default::default(),
    )
    .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e:?}")))?;
    let s = s.column_vector();
    let mut values = DVector::zeros(n);
    for i in 0..n {
        values[i] = s[i];
    }
    let vectors = DMatrix::from_fn(n, n, |i, j| u[(i, j)]);
    // faer returns ascending order; keep the guarantee explicit.
    debug_assert!(values.as_slice().windows(2).all(|w| w[0] <= w[1] || w[0].is_nan()));
    Ok(Eigh { values, vectors })
}

/// `e^{X}/Tr e^{X}` and `ln Tr e^{X}` for a symmetric matrix `X`.
///
/// The spectrum is shifted by its maximum first, so nothing overflows.
pub fn exp_normalized_matrix_into(x: DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let e = eigh(&x)?;
    let top = e.max();
    if !top.is_finite() {
        return Err(Error::Numerical("non-finite exponent".into()));
    }
    let z: f64 = e.values.iter().map(|&v| (v - top).exp()).sum();
    let m = e.map(|v| (v - top).exp() / z);
    Ok((m, top + z.ln()))
}

pub fn eigvalsh(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(eigh(a)?.values)
}

pub fn symmetrize(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

/// Largest absolute entry; cheap scale for relative tolerances.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm(a: &DMatrix<f64>) -> Result<f64> {
    let e = eigvalsh(a)?;
    Ok(e.iter().fold(0.0_f64, |m, x| m.max(x.abs())))
}

/// Trace norm of a symmetric matrix (sum of absolute eigenvalues).
pub fn trace_norm(a: &DMatrix<f64>) -> Result<f64> {
    Ok(eigvalsh(a)?.iter().map(|x| x.abs()).sum())
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn kron_all(mats: &[&DMatrix<f64>]) -> DMatrix<f64> {
    mats.iter()
        .fold(DMatrix::identity(1, 1), |acc, m| kron(&acc, m))
}

/// Mixed-radix strides for row-major (first factor most significant) indexing.
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * dims[k + 1];
    }
    s
}

/// Splits every full index into (kept index, traced index) for a factor mask.
///
/// Returns `table[kept][traced] = full`.
pub fn split_table(dims: &[usize], keep: &[bool]) -> Vec<Vec<usize>> {
    let total: usize = dims.iter().product();
    let kept_dims: Vec<usize> = dims.iter().zip(keep).filter(|(_, k)| **k).map(|(d, _)| *d).collect();
    let traced_dims: Vec<usize> = dims.iter().zip(keep).filter(|(_, k)| !**k).map(|(d, _)| *d).collect();
    let nk: usize = kept_dims.iter().product();
    let nt: usize = traced_dims.iter().product();
    let ks = strides(&kept_dims);
    let ts = strides(&traced_dims);
    let fs = strides(dims);
    let mut table = vec![vec![0usize; nt]; nk];
    for full in 0..total {
        let (mut ki, mut ti, mut kpos, mut tpos) = (0, 0, 0, 0);
        for (f, &d) in dims.iter().enumerate() {
            let digit = (full / fs[f]) % d;
            if keep[f] {
                ki += digit * ks[kpos];
                kpos += 1;
            } else {
                ti += digit * ts[tpos];
                tpos += 1;
            }
        }
        table[ki][ti] = full;
    }
    table
}

/// Partial trace over the factors whose `keep` flag is false.
pub fn partial_trace_dims(a: &DMatrix<f64>, dims: &[usize], keep: &[bool]) -> DMatrix<f64> {
    let table = split_table(dims, keep);
    let nk = table.len();
    let nt = table.first().map_or(1, |r| r.len());
    let mut out = DMatrix::zeros(nk, nk);
    for r in 0..nk {
        for c in 0..nk {
            let mut acc = 0.0;
            for t in 0..nt {
                acc += a[(table[r][t], table[c][t])];
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// `Tr_{¬keep}(A Bᵀ)` for tall matrices whose rows are indexed by `dims`.
///
/// Used to reduce `W ρ Wᵀ` without forming the full square operator.
pub fn reduced_outer(a: &DMatrix<f64>, b: &DMatrix<f64>, dims: &[usize], keep: &[bool]) -> DMatrix<f64> {
    debug_assert_eq!(a.shape(), b.shape());
    let table = split_table(dims, keep);
    let nk = table.len();
    let nt = table.first().map_or(1, |r| r.len());
    let cols = a.ncols();
    let mut out = DMatrix::zeros(nk, nk);
    for r in 0..nk {
        for c in 0..nk {
            let mut acc = 0.0;
            for t in 0..nt {
                let (ra, rb) = (table[r][t], table[c][t]);
                for k in 0..cols {
                    acc += a[(ra, k)] * b[(rb, k)];
                }
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Applies `op` to the contiguous factors `start..start+len` of the row index of `m`.
pub fn apply_on_rows(op: &DMatrix<f64>, dims: &[usize], start: usize, len: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    let left: usize = dims[..start].iter().product();
    let mid: usize = dims[start..start + len].iter().product();
    let right: usize = dims[start + len..].iter().product();
    assert_eq!(op.nrows(), mid, "operator does not match factor block");
    assert_eq!(m.nrows(), left * mid * right);
    let cols = m.ncols();
    let mut out = DMatrix::zeros(m.nrows(), cols);
    let mut block = DMatrix::zeros(mid, right * cols);
    for l in 0..left {
        for i in 0..mid {
            for r in 0..right {
                let row = (l * mid + i) * right + r;
                for c in 0..cols {
                    block[(i, r * cols + c)] = m[(row, c)];
                }
            }
        }
        let res = op * &block;
        for i in 0..mid {
            for r in 0..right {
                let row = (l * mid + i) * right + r;
                for c in 0..cols {
                    out[(row, c)] = res[(i, r * cols + c)];
                }
            }
        }
    }
    out
}

/// Orthogonal polar factor `U Vᵀ` of `a = U Σ Vᵀ` (thin SVD).
pub fn polar(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD did not return U".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Numerical("SVD did not return Vᵀ".into()))?;
    Ok(u * vt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigh_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let e = eigh(&a).unwrap();
        let back = e.map(|x| x);
        assert!((back - &a).abs().max() < 1e-13);
        assert!(e.values[0] <= e.values[1] && e.values[1] <= e.values[2]);
    }

    #[test]
    fn partial_trace_of_product() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 4.0]);
        let ab = kron(&a, &b);
        let ta = partial_trace_dims(&ab, &[2, 3], &[true, false]);
        assert!((ta - &a * 7.0).abs().max() < 1e-14);
        let tb = partial_trace_dims(&ab, &[2, 3], &[false, true]);
        assert!((tb - &b * 6.0).abs().max() < 1e-14);
    }

    #[test]
    fn apply_on_rows_matches_kron() {
        let op = DMatrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64 * 0.1);
        let m = DMatrix::from_fn(16, 3, |i, j| ((i + 2 * j) % 5) as f64);
        let full = kron_all(&[&DMatrix::identity(2, 2), &op, &DMatrix::identity(2, 2)]);
        let direct = &full * &m;
        let fast = apply_on_rows(&op, &[2, 2, 2, 2], 1, 2, &m);
        assert!((direct - fast).abs().max() < 1e-12);
    }

    #[test]
    fn polar_is_orthogonal() {
        let a = DMatrix::from_fn(6, 3, |i, j| ((i * 3 + j * 7) % 11) as f64 - 5.0);
        let p = polar(&a).unwrap();
        let g = p.transpose() * &p;
        assert!((g - DMatrix::identity(3, 3)).abs().max() < 1e-12);
    }
}
