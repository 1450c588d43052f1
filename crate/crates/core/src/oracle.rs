//! Exact references: free-fermion thermodynamics of the transverse-field
//! Ising chain, dense thermal states of small systems, and brute-force
//! enumeration of classical models.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, eigh, Eigh};
use crate::models::{Geometry, InteractionGraph};
use crate::operator::{embed, herm_log, reduce_to, LogFloor, Operator};

/// Hilbert-space cap for [`exact_thermal`].
pub const MAX_EXACT_DIM: usize = 1 << 14;
/// Configuration cap for [`classical_enumerate`].
pub const MAX_CLASSICAL_SITES: usize = 24;

const XK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let x = h * XK[i];
        let s = f(c - x) + f(c + x);
        k += WK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, (k - g).abs() * h)
}

/// Adaptive Gauss–Kronrod (7/15) quadrature to an absolute tolerance.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol || depth >= 40 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth + 1) + rec(f, m, b, 0.5 * tol, depth + 1)
    }
    rec(&f, a, b, tol, 0)
}

/// Quasiparticle half-energy `Λ(k) = √(1 + B² − 2B cos k)`.
pub fn dispersion(b: f64, k: f64) -> f64 {
    (1.0 + b * b - 2.0 * b * k.cos()).max(0.0).sqrt()
}

/// Energy per site of the infinite chain `Σ σᶻσᶻ + B σˣ` at temperature `t`.
///
/// `e(T) = −(1/π) ∫₀^π Λ(k) tanh(Λ(k)/T) dk`. The sign of the coupling does
/// not matter: flipping every other spin maps it to the ferromagnet.
/// `t = 0` gives the ground-state energy density.
pub fn jw_energy_density(b: f64, t: f64) -> f64 {
    let f = |k: f64| {
        let l = dispersion(b, k);
        if t > 0.0 {
            l * (l / t).tanh()
        } else {
            l
        }
    };
    -integrate(f, 0.0, std::f64::consts::PI, 1e-13) / std::f64::consts::PI
}

/// Ground-state energy per site of the periodic `n`-site ring (even `n`).
pub fn jw_ring_ground_energy(b: f64, n: usize) -> Result<f64> {
    if n < 2 || n % 2 == 1 {
        return Err(Error::Size(format!("ring length {n} must be even and at least 2")));
    }
    let s: f64 = (0..n)
        .map(|m| dispersion(b, std::f64::consts::PI * (2 * m + 1) as f64 / n as f64))
        .sum();
    Ok(-s / n as f64)
}

/// Dense Gibbs state of a finite model.
#[derive(Clone, Debug)]
pub struct ExactThermal {
    pub beta: f64,
    pub log_z: f64,
    pub hamiltonian: Operator,
    pub rho: Operator,
    pub spectrum: Eigh,
}

impl ExactThermal {
    pub fn energy(&self) -> Result<f64> {
        self.rho.expectation(&self.hamiltonian)
    }

    pub fn expectation(&self, x: &Operator) -> Result<f64> {
        self.rho.expectation(x)
    }

    /// Reduced state on `sites`.
    pub fn reduced(&self, sites: &[usize]) -> Result<Operator> {
        reduce_to(&self.rho, sites)
    }

    /// `−(1/β) log ρ_S − H_S`, traceless, for a region `S` listed from the cut outward.
    pub fn effective_potential(&self, graph: &InteractionGraph, sites: &[usize]) -> Result<Operator> {
        let r = self.reduced(sites)?;
        let target: Vec<_> = sites
            .iter()
            .map(|&i| *r.support().iter().find(|s| s.index == i).unwrap())
            .collect();
        let r = embed(&r, &target)?;
        let mut v = herm_log(&r, LogFloor::default())?.scaled(-1.0 / self.beta).into_matrix();
        for e in &graph.edges {
            if sites.contains(&e.a.index) && sites.contains(&e.b.index) {
                v -= embed(&e.h, &target)?.matrix();
            }
        }
        Ok(Operator::new(target, linalg::symmetrize(v))?.traceless())
    }
}

pub fn exact_thermal(graph: &InteractionGraph, beta: f64) -> Result<ExactThermal> {
    if graph.geometry == Geometry::InfiniteChain {
        return Err(Error::Size("exact thermal state needs a finite graph".into()));
    }
    let dim: usize = graph.sites.iter().map(|s| s.dim).product();
    if dim > MAX_EXACT_DIM {
        return Err(Error::Size(format!("Hilbert dimension {dim} exceeds {MAX_EXACT_DIM}")));
    }
    let mut h = DMatrix::zeros(dim, dim);
    for e in &graph.edges {
        h += embed(&e.h, &graph.sites)?.matrix();
    }
    let spectrum = eigh(&h)?;
    let emin = spectrum.min();
    let z: f64 = spectrum.values.iter().map(|&e| (-beta * (e - emin)).exp()).sum();
    let rho = spectrum.map(|e| (-beta * (e - emin)).exp() / z);
    Ok(ExactThermal {
        beta,
        log_z: z.ln() - beta * emin,
        hamiltonian: Operator::new(graph.sites.clone(), h)?,
        rho: Operator::from_parts(graph.sites.clone(), rho, true),
        spectrum,
    })
}

/// Exact partition function and marginals of a diagonal model.
#[derive(Clone, Debug)]
pub struct ClassicalResult {
    pub log_z: f64,
    /// `one_site[i][s]`: probability that site `graph.sites[i]` is in basis state `s`.
    pub one_site: Vec<Vec<f64>>,
    /// `two_site[e][(s, t)]`: joint probability on the endpoints of edge `e`.
    pub two_site: Vec<DMatrix<f64>>,
}

pub fn classical_enumerate(graph: &InteractionGraph, beta: f64) -> Result<ClassicalResult> {
    let n = graph.sites.len();
    if graph.geometry == Geometry::InfiniteChain || n > MAX_CLASSICAL_SITES {
        return Err(Error::Size(format!("classical enumeration is limited to {MAX_CLASSICAL_SITES} sites")));
    }
    for e in &graph.edges {
        let m = e.h.matrix();
        let off = m.iter().enumerate().any(|(k, v)| k % (m.nrows() + 1) != 0 && *v != 0.0);
        if off {
            return Err(Error::Contract("classical enumeration needs diagonal edge terms".into()));
        }
    }
    let dims: Vec<usize> = graph.sites.iter().map(|s| s.dim).collect();
    let pos = |idx: usize| graph.sites.iter().position(|s| s.index == idx).unwrap();
    let edges: Vec<(usize, usize, usize, &DMatrix<f64>)> = graph
        .edges
        .iter()
        .map(|e| (pos(e.a.index), pos(e.b.index), e.b.dim, e.h.matrix()))
        .collect();
    let total: usize = dims.iter().product();
    let strides = linalg::strides(&dims);
    let energy = |c: usize| -> f64 {
        edges
            .iter()
            .map(|&(a, b, db, m)| {
                let (sa, sb) = ((c / strides[a]) % dims[a], (c / strides[b]) % dims[b]);
                let k = sa * db + sb;
                m[(k, k)]
            })
            .sum()
    };
    let emin = (0..total).map(energy).fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    let mut one: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
    let mut two: Vec<DMatrix<f64>> = edges.iter().map(|&(a, b, _, _)| DMatrix::zeros(dims[a], dims[b])).collect();
    for c in 0..total {
        let w = (-beta * (energy(c) - emin)).exp();
        z += w;
        for (i, o) in one.iter_mut().enumerate() {
            o[(c / strides[i]) % dims[i]] += w;
        }
        for (t, &(a, b, _, _)) in two.iter_mut().zip(&edges) {
            t[((c / strides[a]) % dims[a], (c / strides[b]) % dims[b])] += w;
        }
    }
    one.iter_mut().flatten().for_each(|p| *p /= z);
    two.iter_mut().for_each(|t| *t /= z);
    Ok(ClassicalResult { log_z: z.ln() - beta * emin, one_site: one, two_site: two })
}
