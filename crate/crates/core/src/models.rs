//! Hamiltonians as graphs of two-body edge terms.
//!
//! One-body terms are split equally over the edges touching a site, so a
//! model is fully described by its edge terms. Each edge keeps the Pauli
//! polynomial it was built from, which is what the JSON form stores.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::kron;
use crate::operator::{embed, pauli, qubits, Operator, Site};

/// Largest Hilbert space [`total_hamiltonian`] will build.
pub const MAX_DENSE_SITES: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PauliTerm {
    pub coef: f64,
    /// One letter per edge site, from `I`, `X`, `Z`.
    pub ops: String,
}

impl PauliTerm {
    pub fn new(coef: f64, ops: &str) -> Self {
        PauliTerm { coef, ops: ops.to_string() }
    }

    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::identity(1, 1);
        for c in self.ops.chars() {
            let p = match c {
                'I' => pauli::id(),
                'X' => pauli::x(),
                'Z' => pauli::z(),
                other => return Err(Error::Serialization(format!("unknown Pauli letter {other:?}"))),
            };
            m = kron(&m, &p);
        }
        Ok(m * self.coef)
    }
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub a: Site,
    pub b: Site,
    pub terms: Vec<PauliTerm>,
    pub h: Operator,
}

impl Edge {
    pub fn from_terms(a: Site, b: Site, terms: Vec<PauliTerm>) -> Result<Self> {
        let mut m = DMatrix::zeros(4, 4);
        for t in &terms {
            if t.ops.len() != 2 {
                return Err(Error::Arity(format!("edge term {:?} is not two-body", t.ops)));
            }
            m += t.matrix()?;
        }
        let h = Operator::new(vec![a, b], m)?;
        Ok(Edge { a, b, terms, h })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Geometry {
    Chain { n: usize },
    InfiniteChain,
    CayleyTree { branching: usize, depth: usize },
}

#[derive(Clone, Debug)]
pub struct InteractionGraph {
    pub sites: Vec<Site>,
    pub edges: Vec<Edge>,
    pub geometry: Geometry,
    /// Seed of the boundary fields, if any were sampled.
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainSize {
    Finite(usize),
    Infinite,
}

fn tfim_edge(i: usize, j: usize, b: f64, wl: f64, wr: f64) -> Result<Edge> {
    let mut terms = vec![PauliTerm::new(1.0, "ZZ")];
    if b != 0.0 {
        terms.push(PauliTerm::new(b * wl, "XI"));
        terms.push(PauliTerm::new(b * wr, "IX"));
    }
    Edge::from_terms(Site::qubit(i), Site::qubit(j), terms)
}

/// `H = Σ σᶻσᶻ + B Σ σˣ` on an open chain or as a translation-invariant template.
pub fn tfim_chain(b: f64, size: ChainSize) -> Result<InteractionGraph> {
    match size {
        ChainSize::Infinite => Ok(InteractionGraph {
            sites: qubits([0, 1]),
            edges: vec![tfim_edge(0, 1, b, 0.5, 0.5)?],
            geometry: Geometry::InfiniteChain,
            seed: None,
        }),
        ChainSize::Finite(n) => {
            if n < 2 {
                return Err(Error::Size(format!("chain needs at least 2 sites, got {n}")));
            }
            let edges = (0..n - 1)
                .map(|i| {
                    let wl = if i == 0 { 1.0 } else { 0.5 };
                    let wr = if i + 2 == n { 1.0 } else { 0.5 };
                    tfim_edge(i, i + 1, b, wl, wr)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(InteractionGraph { sites: qubits(0..n), edges, geometry: Geometry::Chain { n }, seed: None })
        }
    }
}

/// Translation-invariant two-site template `σᶻσᶻ + (B/2)(σˣ⊗I + I⊗σˣ)`.
pub fn tfim_template(b: f64) -> DMatrix<f64> {
    let (x, z, i) = (pauli::x(), pauli::z(), pauli::id());
    kron(&z, &z) + (kron(&x, &i) + kron(&i, &x)) * (0.5 * b)
}

/// Degree-3 Cayley tree, sites numbered breadth first from the center.
#[derive(Clone, Debug)]
pub struct CayleyTree {
    pub depth: usize,
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    pub generation: Vec<usize>,
}

impl CayleyTree {
    pub fn new(depth: usize) -> Result<Self> {
        if depth < 1 {
            return Err(Error::Size("tree depth must be at least 1".into()));
        }
        let mut parent = vec![None];
        let mut children = vec![Vec::new()];
        let mut generation = vec![0];
        let mut frontier = vec![0usize];
        for g in 1..=depth {
            let mut next = Vec::new();
            for &p in &frontier {
                let k = if p == 0 { 3 } else { 2 };
                for _ in 0..k {
                    let id = parent.len();
                    parent.push(Some(p));
                    children.push(Vec::new());
                    generation.push(g);
                    children[p].push(id);
                    next.push(id);
                }
            }
            frontier = next;
        }
        Ok(CayleyTree { depth, parent, children, generation })
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| self.generation[v] == self.depth).collect()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.children[v].len() + usize::from(self.parent[v].is_some())
    }

    /// Number of sites, `1 + 3(2^depth − 1)`.
    pub fn site_count(depth: usize) -> usize {
        1 + 3 * ((1usize << depth) - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFieldConfig {
    pub values: BTreeMap<usize, f64>,
    pub seed: u64,
}

impl BoundaryFieldConfig {
    pub fn zeros(tree: &CayleyTree) -> Self {
        BoundaryFieldConfig { values: tree.leaves().into_iter().map(|v| (v, 0.0)).collect(), seed: 0 }
    }

    pub fn flipped(&self) -> Self {
        BoundaryFieldConfig { values: self.values.iter().map(|(&k, &v)| (k, -v)).collect(), seed: self.seed }
    }

    /// Values in ascending leaf order.
    pub fn vector(&self) -> Vec<f64> {
        self.values.values().copied().collect()
    }
}

/// I.i.d. uniform fields on `[−1, 1]`, one per leaf, in ascending leaf order.
pub fn sample_boundary_fields(seed: u64, tree: &CayleyTree) -> BoundaryFieldConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = tree.leaves().into_iter().map(|v| (v, rng.gen_range(-1.0..=1.0))).collect();
    BoundaryFieldConfig { values, seed }
}

/// Edge term between `parent` and `child`, with the field split used on the tree.
pub(crate) fn tree_edge(tree: &CayleyTree, b: f64, fields: &BoundaryFieldConfig, parent: usize, child: usize) -> Result<Edge> {
    let wp = 1.0 / tree.degree(parent) as f64;
    let wc = 1.0 / tree.degree(child) as f64;
    let mut terms = vec![PauliTerm::new(1.0, "ZZ")];
    if b != 0.0 {
        terms.push(PauliTerm::new(b * wp, "XI"));
        terms.push(PauliTerm::new(b * wc, "IX"));
    }
    if let Some(&r) = fields.values.get(&child) {
        if r != 0.0 {
            terms.push(PauliTerm::new(r, "IZ"));
        }
    }
    Edge::from_terms(Site::qubit(parent), Site::qubit(child), terms)
}

/// `H = Σ σᶻσᶻ + B Σ σˣ + Σ_{leaves} rᵢ σᶻ` on a degree-3 Cayley tree.
pub fn cayley_glass(b: f64, depth: usize, config: &BoundaryFieldConfig) -> Result<InteractionGraph> {
    let tree = CayleyTree::new(depth)?;
    let leaves = tree.leaves();
    if config.values.keys().copied().collect::<Vec<_>>() != leaves {
        return Err(Error::Support("boundary fields must be given exactly on the leaves".into()));
    }
    if let Some((k, v)) = config.values.iter().find(|(_, v)| v.abs() > 1.0) {
        return Err(Error::Contract(format!("boundary field {v} at site {k} outside [-1, 1]")));
    }
    let mut edges = Vec::with_capacity(tree.len() - 1);
    for v in 1..tree.len() {
        edges.push(tree_edge(&tree, b, config, tree.parent[v].unwrap(), v)?);
    }
    Ok(InteractionGraph {
        sites: qubits(0..tree.len()),
        edges,
        geometry: Geometry::CayleyTree { branching: 2, depth },
        seed: Some(config.seed),
    })
}

/// Sum of all embedded edge terms on a finite graph.
pub fn total_hamiltonian(graph: &InteractionGraph) -> Result<Operator> {
    if graph.geometry == Geometry::InfiniteChain {
        return Err(Error::Size("infinite chain has no finite Hamiltonian".into()));
    }
    if graph.sites.len() > MAX_DENSE_SITES {
        return Err(Error::Size(format!("{} sites exceed the dense limit of {MAX_DENSE_SITES}", graph.sites.len())));
    }
    let mut total = Operator::zeros(graph.sites.clone())?.into_matrix();
    for e in &graph.edges {
        total += embed(&e.h, &graph.sites)?.matrix();
    }
    Operator::new(graph.sites.clone(), total)
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    sites: [usize; 2],
    terms: Vec<PauliTerm>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    geometry: Geometry,
    sites: Vec<Site>,
    edges: Vec<EdgeDoc>,
    seed: Option<u64>,
}

impl InteractionGraph {
    pub fn to_json(&self) -> Result<String> {
        let doc = GraphDoc {
            geometry: self.geometry,
            sites: self.sites.clone(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDoc { sites: [e.a.index, e.b.index], terms: e.terms.clone() })
                .collect(),
            seed: self.seed,
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: GraphDoc = serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        let site = |i: usize| {
            doc.sites
                .iter()
                .find(|s| s.index == i)
                .copied()
                .ok_or_else(|| Error::Support(format!("edge endpoint {i} is not a site")))
        };
        let edges = doc
            .edges
            .into_iter()
            .map(|e| Edge::from_terms(site(e.sites[0])?, site(e.sites[1])?, e.terms))
            .collect::<Result<Vec<_>>>()?;
        Ok(InteractionGraph { sites: doc.sites, edges, geometry: doc.geometry, seed: doc.seed })
    }
}
