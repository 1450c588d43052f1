//! Ternary entanglement renormalization for translation-invariant chains.
//!
//! One layer maps three fine sites to one coarse site. A disentangler `u`
//! acts across every block boundary, then an isometry `w` keeps `χ_out`
//! states of each three-site block. Every fine bond ends up inside exactly one
//! coarse bond, so the whole fine Hamiltonian ascends to a single coarse edge
//! template.
//!
//! Layers are optimized against the ground state of a small periodic ring of
//! top-level sites, by alternating linearized (environment) updates of `w`
//! and `u` followed by polar decomposition.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, apply_on_rows, kron, partial_trace_dims, polar, reduced_outer, strides, symmetrize};

pub const BLOCK_FACTOR: usize = 3;
const UNITARY_TOL: f64 = 1e-10;
/// Slack for accepting an update that does not lower the energy.
const ACCEPT_SLACK: f64 = 1e-12;

mod mat_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Blob {
        rows: usize,
        cols: usize,
        /// Row-major entries.
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        Blob { rows: m.nrows(), cols: m.ncols(), data }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let b = Blob::deserialize(d)?;
        if b.rows * b.cols != b.data.len() {
            return Err(serde::de::Error::custom(format!(
                "matrix blob has {} entries, expected {}x{}",
                b.data.len(),
                b.rows,
                b.cols
            )));
        }
        Ok(DMatrix::from_row_slice(b.rows, b.cols, &b.data))
    }
}

/// Disentangler and isometry of one ternary layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeraLayer {
    /// Orthogonal on `χ_in²`.
    #[serde(with = "mat_serde")]
    pub u: DMatrix<f64>,
    /// Isometry `χ_in³ → χ_out`, stored as a `χ_in³ × χ_out` matrix.
    #[serde(with = "mat_serde")]
    pub w: DMatrix<f64>,
    pub chi_in: usize,
    pub chi_out: usize,
}

impl MeraLayer {
    pub fn new(u: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let chi_out = w.ncols();
        let d3 = w.nrows();
        let chi_in = (d3 as f64).cbrt().round() as usize;
        if chi_in.pow(3) != d3 || chi_in == 0 {
            return Err(Error::Dimension(format!("isometry has {d3} rows, not a cube")));
        }
        if u.shape() != (chi_in * chi_in, chi_in * chi_in) {
            return Err(Error::Dimension(format!("disentangler is {:?}, expected {}²", u.shape(), chi_in * chi_in)));
        }
        if chi_out == 0 || chi_out > d3 {
            return Err(Error::Dimension(format!("χ_out = {chi_out} must lie in 1..={d3}")));
        }
        let layer = MeraLayer { u, w, chi_in, chi_out };
        let defect = layer.orthogonality_defect();
        if defect > UNITARY_TOL {
            return Err(Error::Contract(format!("layer is not orthogonal (defect {defect:.3e})")));
        }
        Ok(layer)
    }

    /// `u = I`, `w = I`: the no-truncation layer.
    pub fn identity(chi_in: usize) -> Self {
        let d3 = chi_in.pow(3);
        MeraLayer {
            u: DMatrix::identity(chi_in * chi_in, chi_in * chi_in),
            w: DMatrix::identity(d3, d3),
            chi_in,
            chi_out: d3,
        }
    }

    /// Largest entry of `uᵀu − I` and `wᵀw − I`.
    pub fn orthogonality_defect(&self) -> f64 {
        let du = self.u.transpose() * &self.u - DMatrix::identity(self.u.ncols(), self.u.ncols());
        let dw = self.w.transpose() * &self.w - DMatrix::identity(self.chi_out, self.chi_out);
        linalg::max_abs(&du).max(linalg::max_abs(&dw))
    }
}

/// Edge template of one renormalization level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseLevel {
    pub level: usize,
    /// Two-body term on `χ² × χ²`.
    #[serde(with = "mat_serde")]
    pub hamiltonian: DMatrix<f64>,
    /// Local dimension `χ` of this level.
    pub dim: usize,
    /// Layer that produced this level from the one below; `None` at level 0.
    pub layer: Option<MeraLayer>,
    pub block_factor: usize,
}

impl CoarseLevel {
    /// Number of bare sites represented by one site of this level.
    pub fn sites_per_site(&self) -> usize {
        self.block_factor.pow(self.level as u32)
    }
}

fn local_dim(h: &DMatrix<f64>) -> Result<usize> {
    let n = h.nrows();
    let d = (n as f64).sqrt().round() as usize;
    if d * d != n || h.ncols() != n || d == 0 {
        return Err(Error::Dimension(format!("edge term of shape {:?} is not d² × d²", h.shape())));
    }
    Ok(d)
}

/// The three bond terms of a coarse bond, dressed by the disentangler.
///
/// With six fine sites `0..6` under `w ⊗ w`, they act on sites `1..4`, `2..4`
/// and `2..5`.
fn dressed_terms(h: &DMatrix<f64>, u: &DMatrix<f64>, d: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let i = DMatrix::identity(d, d);
    let iu = kron(&i, u);
    let ui = kron(u, &i);
    let xl = iu.transpose() * kron(h, &i) * &iu;
    let xc = u.transpose() * h * u;
    let xr = ui.transpose() * kron(&i, h) * &ui;
    (xl, xc, xr)
}

/// `(Y W₂, W₂)` with `W₂ = w ⊗ w` and `Y` the dressed bond terms on six sites.
fn ascend_rows(h: &DMatrix<f64>, layer: &MeraLayer) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = layer.chi_in;
    let w2 = kron(&layer.w, &layer.w);
    let (xl, xc, xr) = dressed_terms(h, &layer.u, d);
    let dims = [d; 6];
    let y = apply_on_rows(&xl, &dims, 1, 3, &w2) + apply_on_rows(&xc, &dims, 2, 2, &w2) + apply_on_rows(&xr, &dims, 2, 3, &w2);
    (y, w2)
}

/// Ascends the edge template `h` through `layer` to the coarse template.
pub fn renormalize(h: &DMatrix<f64>, layer: &MeraLayer) -> Result<DMatrix<f64>> {
    if local_dim(h)? != layer.chi_in {
        return Err(Error::Dimension(format!(
            "edge term has local dimension {}, layer expects {}",
            local_dim(h)?,
            layer.chi_in
        )));
    }
    let (y, w2) = ascend_rows(h, layer);
    Ok(symmetrize(w2.transpose() * y))
}

/// Fine two-site density matrix (averaged over the three bonds) seen by a
/// coarse two-site density matrix.
pub fn descend(rho: &DMatrix<f64>, layer: &MeraLayer) -> Result<DMatrix<f64>> {
    if rho.shape() != (layer.chi_out * layer.chi_out, layer.chi_out * layer.chi_out) {
        return Err(Error::Dimension(format!("density matrix {:?} does not match χ_out = {}", rho.shape(), layer.chi_out)));
    }
    let d = layer.chi_in;
    let (t123, t23, t234) = block_densities(rho, layer);
    let i = DMatrix::identity(d, d);
    let iu = kron(&i, &layer.u);
    let ui = kron(&layer.u, &i);
    let rl = partial_trace_dims(&(&iu * t123 * iu.transpose()), &[d; 3], &[true, true, false]);
    let rc = &layer.u * t23 * layer.u.transpose();
    let rr = partial_trace_dims(&(&ui * t234 * ui.transpose()), &[d; 3], &[false, true, true]);
    Ok(symmetrize((rl + rc + rr) / 3.0))
}

/// Reduced densities of `W₂ ρ W₂ᵀ` on fine sites `1..4`, `2..4`, `2..5`.
fn block_densities(rho: &DMatrix<f64>, layer: &MeraLayer) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let w2 = kron(&layer.w, &layer.w);
    let a = &w2 * rho;
    let dims = [layer.chi_in; 6];
    let mask = |lo: usize, hi: usize| -> Vec<bool> { (0..6).map(|k| (lo..hi).contains(&k)).collect() };
    (
        reduced_outer(&a, &w2, &dims, &mask(1, 4)),
        reduced_outer(&a, &w2, &dims, &mask(2, 4)),
        reduced_outer(&a, &w2, &dims, &mask(2, 5)),
    )
}

/// `h` acting on sites `(a, b)` of an `n`-site register of dimension `chi` each.
fn register_bond(h: &DMatrix<f64>, chi: usize, n: usize, a: usize, b: usize) -> DMatrix<f64> {
    let total = chi.pow(n as u32);
    let st = strides(&vec![chi; n]);
    let mut out = DMatrix::zeros(total, total);
    for s in 0..total {
        let (sa, sb) = ((s / st[a]) % chi, (s / st[b]) % chi);
        let base = s - sa * st[a] - sb * st[b];
        let col = sa * chi + sb;
        for x in 0..chi {
            for y in 0..chi {
                let v = h[(x * chi + y, col)];
                if v != 0.0 {
                    out[(base + x * st[a] + y * st[b], s)] += v;
                }
            }
        }
    }
    out
}

/// Periodic ring `Σ_b h_{b,b+1}` on `n` sites.
pub fn ring_hamiltonian(h: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let chi = local_dim(h)?;
    if n < 2 {
        return Err(Error::Size(format!("a ring needs at least 2 sites, got {n}")));
    }
    let total = chi.checked_pow(n as u32).filter(|&t| t <= 1 << 14).ok_or_else(|| {
        Error::Size(format!("ring of {n} sites with χ = {chi} is too large for dense diagonalization"))
    })?;
    let mut r = DMatrix::zeros(total, total);
    for b in 0..n {
        r += register_bond(h, chi, n, b, (b + 1) % n);
    }
    Ok(r)
}

/// Ground state of the periodic top ring.
#[derive(Clone, Debug)]
pub struct RingGround {
    /// Total ground energy of the ring.
    pub energy: f64,
    /// Two-site reduced density matrix, averaged over the `n` bonds.
    pub rdm: DMatrix<f64>,
}

pub fn ring_ground(h: &DMatrix<f64>, n: usize) -> Result<RingGround> {
    let chi = local_dim(h)?;
    let r = ring_hamiltonian(h, n)?;
    let e = linalg::eigh(&r)?;
    let psi = e.vectors.column(0);
    let st = strides(&vec![chi; n]);
    let total = r.nrows();
    let mut rdm = DMatrix::zeros(chi * chi, chi * chi);
    for b in 0..n {
        let (a, c) = (b, (b + 1) % n);
        let rests: Vec<usize> = (0..total).filter(|s| (s / st[a]) % chi == 0 && (s / st[c]) % chi == 0).collect();
        let q = DMatrix::from_fn(chi * chi, rests.len(), |k, j| psi[rests[j] + (k / chi) * st[a] + (k % chi) * st[c]]);
        rdm += &q * q.transpose();
    }
    Ok(RingGround { energy: e.values[0], rdm: symmetrize(rdm / n as f64) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeraConfig {
    pub chi: usize,
    pub layers: usize,
    pub sweeps: usize,
    /// Early stop once a sweep changes the energy by less than this.
    pub tol: f64,
    /// Sites of the exactly diagonalized top ring.
    pub ring_sites: usize,
    /// When set, the disentanglers start from a random rotation near identity.
    pub restart_seed: Option<u64>,
}

impl MeraConfig {
    pub fn new(chi: usize, layers: usize) -> Self {
        MeraConfig { chi, layers, sweeps: 200, tol: 1e-10, ring_sites: 4, restart_seed: None }
    }

    pub fn with_sweeps(mut self, sweeps: usize) -> Self {
        self.sweeps = sweeps;
        self
    }
}

/// Optimized layers with the edge template of every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeraStack {
    pub levels: Vec<CoarseLevel>,
    pub ring_sites: usize,
    /// Ground energy per bare site after each sweep (index 0 = initial layers).
    pub energy_history: Vec<f64>,
}

impl MeraStack {
    /// Variational ground energy per bare site.
    pub fn ground_energy(&self) -> f64 {
        *self.energy_history.last().unwrap()
    }

    pub fn layers(&self) -> Vec<&MeraLayer> {
        self.levels.iter().filter_map(|l| l.layer.as_ref()).collect()
    }

    pub fn top(&self) -> &CoarseLevel {
        self.levels.last().unwrap()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let stack: MeraStack = serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        for (k, lvl) in stack.levels.iter().enumerate() {
            if lvl.level != k || lvl.block_factor != BLOCK_FACTOR || (k == 0) != lvl.layer.is_none() {
                return Err(Error::Serialization(format!("level {k} is malformed")));
            }
            if local_dim(&lvl.hamiltonian)? != lvl.dim {
                return Err(Error::Serialization(format!("level {k} template does not match χ = {}", lvl.dim)));
            }
            if let Some(layer) = &lvl.layer {
                MeraLayer::new(layer.u.clone(), layer.w.clone())?;
                if layer.chi_out != lvl.dim || layer.chi_in != stack.levels[k - 1].dim {
                    return Err(Error::Serialization(format!("layer {k} dimensions do not chain")));
                }
            }
        }
        if stack.energy_history.is_empty() {
            return Err(Error::Serialization("empty energy history".into()));
        }
        Ok(stack)
    }
}

/// Deterministic start: `u = I`, `w` = lowest eigenvectors of the three-site block.
pub fn initial_layer(h: &DMatrix<f64>, chi_out: usize) -> Result<MeraLayer> {
    let d = local_dim(h)?;
    if chi_out == 0 || chi_out > d.pow(3) {
        return Err(Error::Dimension(format!("χ_out = {chi_out} exceeds χ_in³ = {}", d.pow(3))));
    }
    let i = DMatrix::identity(d, d);
    let block = kron(h, &i) + kron(&i, h);
    let e = linalg::eigh(&block)?;
    let w = e.vectors.columns(0, chi_out).into_owned();
    Ok(MeraLayer { u: DMatrix::identity(d * d, d * d), w, chi_in: d, chi_out })
}

fn perturbed_identity(n: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let g = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + 0.1 * rng.gen_range(-1.0..1.0));
    polar(&g)
}

fn bond_energy(rho: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    rho.component_mul(h).sum()
}

/// One `w` update and one `u` update against a fixed coarse density matrix.
///
/// Returns the new layer and `Tr(ρ H_coarse)`. A candidate is kept only when
/// it does not raise that energy.
pub fn update_layer(h: &DMatrix<f64>, layer: &MeraLayer, rho: &DMatrix<f64>) -> Result<(MeraLayer, f64)> {
    let d = layer.chi_in;
    let co = layer.chi_out;
    let d3 = d.pow(3);
    // A negative definite term turns energy minimization into maximizing a
    // linear form, which the polar decomposition solves.
    let top = linalg::eigh(h)?.max();
    let hs = h - DMatrix::identity(d * d, d * d) * top;
    let mut cur = layer.clone();
    let mut e0 = bond_energy(rho, &renormalize(h, &cur)?);

    let (y, _) = ascend_rows(&hs, &cur);
    let z = y * rho;
    let w = &cur.w;
    let mut g = DMatrix::zeros(d3, co);
    for i in 0..d3 {
        for j in 0..d3 {
            let row = i * d3 + j;
            for a in 0..co {
                for b in 0..co {
                    let zv = z[(row, a * co + b)];
                    g[(i, a)] += w[(j, b)] * zv;
                    g[(j, b)] += w[(i, a)] * zv;
                }
            }
        }
    }
    let cand = MeraLayer { w: -polar(&g)?, ..cur.clone() };
    let e1 = bond_energy(rho, &renormalize(h, &cand)?);
    if e1 <= e0 + ACCEPT_SLACK {
        cur = cand;
        e0 = e1;
    }

    let (t123, t23, t234) = block_densities(rho, &cur);
    let i = DMatrix::identity(d, d);
    let u = &cur.u;
    let ml = kron(&hs, &i) * kron(&i, u) * t123;
    let mr = kron(&i, &hs) * kron(u, &i) * t234;
    let env = partial_trace_dims(&ml, &[d; 3], &[false, true, true])
        + &hs * u * t23
        + partial_trace_dims(&mr, &[d; 3], &[true, true, false]);
    let cand = MeraLayer { u: -polar(&env)?, ..cur.clone() };
    let e1 = bond_energy(rho, &renormalize(h, &cand)?);
    if e1 <= e0 + ACCEPT_SLACK {
        cur = cand;
        e0 = e1;
    }
    Ok((cur, e0))
}

/// Builds and optimizes `config.layers` layers on top of the edge template `h0`.
pub fn optimize_stack(h0: &DMatrix<f64>, config: &MeraConfig) -> Result<MeraStack> {
    let d0 = local_dim(h0)?;
    if config.chi == 0 {
        return Err(Error::Dimension("χ must be positive".into()));
    }
    if config.ring_sites < 2 {
        return Err(Error::Size(format!("top ring needs at least 2 sites, got {}", config.ring_sites)));
    }
    let mut rng = config.restart_seed.map(ChaCha8Rng::seed_from_u64);
    let mut hs = vec![h0.clone()];
    let mut layers: Vec<MeraLayer> = Vec::with_capacity(config.layers);
    let mut dims = vec![d0];
    for _ in 0..config.layers {
        let d = *dims.last().unwrap();
        let mut layer = initial_layer(hs.last().unwrap(), config.chi.min(d.pow(3)))?;
        if let Some(rng) = rng.as_mut() {
            layer.u = perturbed_identity(d * d, rng)?;
        }
        hs.push(renormalize(hs.last().unwrap(), &layer)?);
        dims.push(layer.chi_out);
        layers.push(layer);
    }
    let scale = (config.ring_sites * BLOCK_FACTOR.pow(config.layers as u32)) as f64;
    let mut history = Vec::new();
    for sweep in 0..=config.sweeps {
        let ring = ring_ground(hs.last().unwrap(), config.ring_sites)?;
        let e = ring.energy / scale;
        let settled = history.last().is_some_and(|&prev: &f64| (prev - e).abs() < config.tol);
        history.push(e);
        if sweep == config.sweeps || settled || layers.is_empty() {
            break;
        }
        let mut rhos = vec![ring.rdm];
        for k in (0..layers.len()).rev() {
            let below = descend(&rhos[0], &layers[k])?;
            rhos.insert(0, below);
        }
        // rhos[k + 1] is the density matrix just above layer k.
        for k in 0..layers.len() {
            let (next, _) = update_layer(&hs[k], &layers[k], &rhos[k + 1])?;
            layers[k] = next;
            hs[k + 1] = renormalize(&hs[k], &layers[k])?;
        }
    }
    let mut levels = vec![CoarseLevel { level: 0, hamiltonian: hs[0].clone(), dim: d0, layer: None, block_factor: BLOCK_FACTOR }];
    for (k, layer) in layers.into_iter().enumerate() {
        levels.push(CoarseLevel {
            level: k + 1,
            hamiltonian: hs[k + 1].clone(),
            dim: layer.chi_out,
            layer: Some(layer),
            block_factor: BLOCK_FACTOR,
        });
    }
    Ok(MeraStack { levels, ring_sites: config.ring_sites, energy_history: history })
}

/// Optimizes a single layer on `h` against a four-site top ring.
///
/// `seed` only matters as a random restart of the disentangler; `None` gives
/// the deterministic identity start.
pub fn optimize_layer(h: &DMatrix<f64>, chi_out: usize, sweeps: usize, seed: Option<u64>) -> Result<MeraLayer> {
    let d = local_dim(h)?;
    if chi_out > d.pow(3) {
        return Err(Error::Dimension(format!("χ_out = {chi_out} exceeds χ_in³ = {}", d.pow(3))));
    }
    let config = MeraConfig { chi: chi_out, layers: 1, sweeps, tol: 1e-10, ring_sites: 4, restart_seed: seed };
    let stack = optimize_stack(h, &config)?;
    Ok(stack.levels[1].layer.clone().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::tfim_template;
    use crate::operator::pauli;
    use crate::oracle::{jw_energy_density, jw_ring_ground_energy};

    fn rotation(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        polar(&DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))).unwrap()
    }

    fn sorted_spectrum(m: &DMatrix<f64>) -> Vec<f64> {
        linalg::eigvalsh(m).unwrap().iter().copied().collect()
    }

    #[test]
    fn full_isometry_preserves_ring_spectrum() {
        let h = tfim_template(0.8);
        let layer = MeraLayer::new(rotation(4, 1), rotation(8, 2)).unwrap();
        let coarse = renormalize(&h, &layer).unwrap();
        for n in [2, 3] {
            let fine = sorted_spectrum(&ring_hamiltonian(&h, 3 * n).unwrap());
            let got = sorted_spectrum(&ring_hamiltonian(&coarse, n).unwrap());
            let err = fine.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "n={n}: {err}");
        }
    }

    #[test]
    fn classical_flow_matches_hand_computation() {
        // B = 0: the two Néel block states |010>, |101> keep the coarse bond
        // at −2 (two satisfied inner bonds) plus a renormalized ZZ coupling.
        let h = tfim_template(0.0);
        let layer = optimize_layer(&h, 2, 20, None).unwrap();
        let coarse = renormalize(&h, &layer).unwrap();
        let z = pauli::z();
        let w = &layer.w;
        let zt = DMatrix::from_fn(2, 2, |a, b| {
            // Z on the first and last site of each block state.
            let first = kron(&kron(&z, &pauli::id()), &pauli::id());
            (w.column(a).transpose() * first * w.column(b))[(0, 0)]
        });
        let want = DMatrix::identity(4, 4) * -2.0 + kron(&zt, &zt);
        assert!((&coarse - &want).abs().max() < 1e-10);
        let spec = sorted_spectrum(&coarse);
        for (a, b) in spec.iter().zip([-3.0, -3.0, -1.0, -1.0]) {
            assert!((a - b).abs() < 1e-10, "{spec:?}");
        }
        let stack = optimize_stack(&h, &MeraConfig::new(2, 1).with_sweeps(20)).unwrap();
        assert!((stack.ground_energy() + 1.0).abs() < 1e-8);
    }

    #[test]
    fn critical_two_layers_reach_thermodynamic_energy() {
        let h = tfim_template(1.0);
        let stack = optimize_stack(&h, &MeraConfig::new(4, 2)).unwrap();
        let e = stack.ground_energy();
        let exact = jw_energy_density(1.0, 0.0);
        assert!((e - exact).abs() < 1e-3, "{e} vs {exact}");
        // Variational on the 36-site ring it represents.
        assert!(e >= jw_ring_ground_energy(1.0, 36).unwrap() - 1e-12);
        for w in stack.energy_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "energy rose: {w:?}");
        }
        for layer in stack.layers() {
            assert!(layer.orthogonality_defect() < 1e-10);
        }
    }

    #[test]
    fn variational_bound_on_small_rings() {
        let h = tfim_template(1.0);
        let one = optimize_stack(&h, &MeraConfig::new(4, 1).with_sweeps(60)).unwrap();
        assert!(one.ground_energy() >= jw_ring_ground_energy(1.0, 12).unwrap() - 1e-12);
        let cfg = MeraConfig { ring_sites: 3, ..MeraConfig::new(4, 1).with_sweeps(60) };
        let nine = optimize_stack(&h, &cfg).unwrap();
        let exact9 = linalg::eigh(&ring_hamiltonian(&h, 9).unwrap()).unwrap().min() / 9.0;
        assert!(nine.ground_energy() >= exact9 - 1e-12, "{} < {exact9}", nine.ground_energy());
    }

    #[test]
    fn optimization_beats_plain_block_renormalization() {
        let h = tfim_template(1.0);
        let plain = optimize_stack(&h, &MeraConfig::new(4, 2).with_sweeps(0)).unwrap();
        let tuned = optimize_stack(&h, &MeraConfig::new(4, 2).with_sweeps(100)).unwrap();
        assert_eq!(plain.energy_history.len(), 1);
        assert!(tuned.ground_energy() < plain.ground_energy() - 1e-4, "{} vs {}", tuned.ground_energy(), plain.ground_energy());
    }

    #[test]
    fn descend_is_dual_to_renormalize() {
        let h = tfim_template(0.7);
        let layer = initial_layer(&h, 4).unwrap();
        let layer = MeraLayer { u: rotation(4, 5), ..layer };
        let rho = ring_ground(&renormalize(&h, &layer).unwrap(), 4).unwrap().rdm;
        let coarse = bond_energy(&rho, &renormalize(&h, &layer).unwrap());
        let fine = bond_energy(&descend(&rho, &layer).unwrap(), &h);
        assert!((coarse - 3.0 * fine).abs() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let h = tfim_template(1.0);
        assert!(matches!(initial_layer(&h, 9), Err(Error::Dimension(_))));
        assert!(matches!(optimize_layer(&h, 9, 1, None), Err(Error::Dimension(_))));
        let layer = MeraLayer::identity(4);
        assert!(matches!(renormalize(&h, &layer), Err(Error::Dimension(_))));
        assert!(matches!(MeraLayer::new(DMatrix::identity(4, 4), DMatrix::identity(7, 2)), Err(Error::Dimension(_))));
        assert!(matches!(
            MeraLayer::new(DMatrix::identity(4, 4), DMatrix::from_element(8, 2, 1.0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let h = tfim_template(1.0);
        let stack = optimize_stack(&h, &MeraConfig::new(3, 1).with_sweeps(5)).unwrap();
        let back = MeraStack::from_json(&stack.to_json().unwrap()).unwrap();
        assert_eq!(back, stack);
        let broken = stack.to_json().unwrap().replace("\"block_factor\":3", "\"block_factor\":2");
        assert!(MeraStack::from_json(&broken).is_err());
    }

    #[test]
    fn restart_seed_is_reproducible() {
        let h = tfim_template(1.0);
        let a = optimize_layer(&h, 4, 5, Some(3)).unwrap();
        let b = optimize_layer(&h, 4, 5, Some(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.orthogonality_defect() < 1e-10);
    }
}
