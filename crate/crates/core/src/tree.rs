//! Belief propagation on the degree-3 Cayley-tree spin glass.
//!
//! The message sent from node `v` to its parent `p` lives on `{p, v}` plus
//! the children of `v`. It is built by ⊙-merging the messages of the two
//! children with `e^{−βh_{p,v}}` (eight sites) and tracing out the
//! grandchildren. The three messages arriving at the center are joined into
//! the central belief.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chain::error_estimate;
use crate::error::{Error, Result};
use crate::linalg::{self, exp_normalized_matrix_into};
use crate::models::{sample_boundary_fields, tree_edge, BoundaryFieldConfig, CayleyTree};
use crate::operator::{
    cumulant_decompose, embed, log_matrix, pauli, reduce_to, union, LogFloor, Operator, Site, DEFAULT_FLOOR,
};

#[derive(Clone, Debug)]
pub struct TreeMessage {
    pub op: Operator,
    pub log_norm: f64,
    /// Receiving site.
    pub parent: usize,
    /// Sending site.
    pub node: usize,
    /// Bare edge terms with both ends inside the support.
    edges: Vec<Operator>,
    /// Exact logarithm while nothing has been traced.
    log: Option<DMatrix<f64>>,
}

impl TreeMessage {
    fn log(&self) -> Result<DMatrix<f64>> {
        match &self.log {
            Some(l) => Ok(l.clone()),
            None => log_matrix(self.op.matrix(), LogFloor::Clamp(DEFAULT_FLOOR)),
        }
    }

    /// Whether the message is an exact reduced Boltzmann factor (nothing traced yet).
    pub fn is_exact(&self) -> bool {
        self.log.is_some()
    }

    /// `−(1/β) log m − H_W`, traceless, with sites ordered from the cut
    /// outward: the children of `node`, then `node`, then `parent`.
    pub fn effective_potential(&self, beta: f64) -> Result<Operator> {
        let sup = self.op.support().to_vec();
        let mut v = self.log()? * (-1.0 / beta);
        for e in &self.edges {
            v -= embed(e, &sup)?.matrix();
        }
        let v = Operator::new(sup, linalg::symmetrize(v))?.traceless();
        embed(&v, &self.cut_order())
    }

    fn cut_order(&self) -> Vec<Site> {
        let sup = self.op.support();
        let mut order: Vec<Site> =
            sup.iter().filter(|s| s.index != self.parent && s.index != self.node).copied().collect();
        order.extend(sup.iter().filter(|s| s.index == self.node));
        order.extend(sup.iter().filter(|s| s.index == self.parent));
        order
    }
}

/// ⊙-merges child messages with the parent edge and traces the grandchildren.
///
/// `h_parent` acts on `(parent, node)`. A leaf passes no children.
pub fn merge_messages(children: &[&TreeMessage], h_parent: &Operator, beta: f64) -> Result<TreeMessage> {
    let (p, v) = match h_parent.support() {
        [p, v] => (*p, *v),
        _ => return Err(Error::Arity("parent edge must act on two sites".into())),
    };
    for c in children {
        if c.parent != v.index {
            return Err(Error::Support(format!("child message from {} is not addressed to {}", c.node, v.index)));
        }
    }
    let mut target = vec![p, v];
    for c in children {
        target = union(&target, c.op.support());
    }
    let keep: Vec<usize> = [p.index, v.index].into_iter().chain(children.iter().map(|c| c.node)).collect();
    let mut x = embed(h_parent, &target)?.into_matrix() * -beta;
    let mut edges = vec![h_parent.clone()];
    for c in children {
        x += embed(&Operator::new(c.op.support().to_vec(), c.log()?)?, &target)?.matrix();
        edges.extend(c.edges.iter().cloned());
    }
    let (m, lz) = exp_normalized_matrix_into(x.clone())?;
    let log_norm = lz + children.iter().map(|c| c.log_norm).sum::<f64>();
    let full = Operator::from_parts_checked(target.clone(), m)?;
    if keep.len() == target.len() {
        for i in 0..x.nrows() {
            x[(i, i)] -= lz;
        }
        return Ok(TreeMessage { op: full, log_norm, parent: p.index, node: v.index, edges, log: Some(x) });
    }
    let op = reduce_to(&full, &keep)?;
    let op = Operator::from_parts_checked(op.support().to_vec(), op.into_matrix())?;
    edges.retain(|e| e.support().iter().all(|s| keep.contains(&s.index)));
    Ok(TreeMessage { op, log_norm, parent: p.index, node: v.index, edges, log: None })
}

/// Message from `node` to its parent given the two child messages.
pub fn tree_message(m_child_a: &TreeMessage, m_child_b: &TreeMessage, h_parent: &Operator, beta: f64) -> Result<TreeMessage> {
    merge_messages(&[m_child_a, m_child_b], h_parent, beta)
}

/// Joins the three messages arriving at the center into a normalized belief.
pub fn central_belief(messages: &[&TreeMessage]) -> Result<Operator> {
    Ok(central_belief_with_norm(messages)?.0)
}

/// Central belief and `ln Z` of the whole tree.
pub fn central_belief_with_norm(messages: &[&TreeMessage]) -> Result<(Operator, f64)> {
    if messages.len() != 3 {
        return Err(Error::Arity(format!("central belief needs 3 messages, got {}", messages.len())));
    }
    let center = messages[0].parent;
    if messages.iter().any(|m| m.parent != center) {
        return Err(Error::Support("messages are not addressed to one site".into()));
    }
    let mut target: Vec<Site> = Vec::new();
    for m in messages {
        target = union(&target, m.op.support());
    }
    let dim: usize = target.iter().map(|s| s.dim).product();
    let mut x = DMatrix::zeros(dim, dim);
    for m in messages {
        x += embed(&Operator::new(m.op.support().to_vec(), m.log()?)?, &target)?.matrix();
    }
    let (b, lz) = exp_normalized_matrix_into(x)?;
    let log_z = lz + messages.iter().map(|m| m.log_norm).sum::<f64>();
    Ok((Operator::from_parts_checked(target, b)?, log_z))
}

/// Error estimate of one incoming message, expectations in the central belief.
pub fn message_error_estimate(m: &TreeMessage, belief: &Operator, beta: f64) -> Result<f64> {
    if m.is_exact() {
        return Ok(0.0);
    }
    let v = m.effective_potential(beta)?;
    let cs = cumulant_decompose(&v)?;
    let red = reduce_to(belief, &m.op.indices())?;
    let red = embed(&red, v.support())?;
    error_estimate(&cs, beta, &red)
}

/// Central-site result of one boundary-field instance.
#[derive(Clone, Debug)]
pub struct InstanceSolution {
    pub sz: f64,
    pub belief: Operator,
    pub error_estimate: f64,
    pub log_z: f64,
}

/// Runs the leaf-to-center sweep for one field configuration.
pub fn solve_instance(b: f64, beta: f64, tree: &CayleyTree, fields: &BoundaryFieldConfig) -> Result<InstanceSolution> {
    if !(beta > 0.0) {
        return Err(Error::Contract(format!("inverse temperature {beta} must be positive")));
    }
    let n = tree.len();
    let mut msgs: Vec<Option<TreeMessage>> = vec![None; n];
    for v in (1..n).rev() {
        let p = tree.parent[v].unwrap();
        let edge = tree_edge(tree, b, fields, p, v)?;
        let kids: Vec<TreeMessage> = tree.children[v].iter().map(|&c| msgs[c].take().unwrap()).collect();
        let refs: Vec<&TreeMessage> = kids.iter().collect();
        msgs[v] = Some(merge_messages(&refs, &edge.h, beta)?);
    }
    let top: Vec<TreeMessage> = tree.children[0].iter().map(|&c| msgs[c].take().unwrap()).collect();
    let refs: Vec<&TreeMessage> = top.iter().collect();
    let (belief, log_z) = central_belief_with_norm(&refs)?;
    let center = reduce_to(&belief, &[0])?;
    let sz = center.matrix().component_mul(&pauli::z()).sum();
    let mut est = 0.0;
    for m in &top {
        est += message_error_estimate(m, &belief, beta)?;
    }
    Ok(InstanceSolution { sz, belief, error_estimate: est, log_z })
}

/// Seed of instance `index`, derived from the run seed by hashing.
pub fn instance_seed(seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Hex SHA-256 of the boundary-field vector (little-endian f64 bytes).
pub fn fields_hash(fields: &BoundaryFieldConfig) -> String {
    let mut h = Sha256::new();
    for v in fields.vector() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: u64,
    pub seed: u64,
    pub fields_sha256: String,
    pub sz: f64,
    pub bp_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchResult {
    pub q_ea: f64,
    pub per_instance: Vec<f64>,
    pub stderr: f64,
    /// Mean BP error estimate over instances.
    pub bp_error: f64,
    pub records: Vec<InstanceRecord>,
}

/// Edwards–Anderson parameter `⟨⟨σᶻ₀⟩²⟩` over random boundary fields.
///
/// Instances run in parallel on the current rayon pool; each draws its fields
/// from its own derived seed, so results do not depend on the thread count.
pub fn quench_average(b: f64, t: f64, depth: usize, n_instances: usize, seed: u64) -> Result<QuenchResult> {
    if n_instances == 0 {
        return Err(Error::Size("at least one instance is required".into()));
    }
    if !(t > 0.0) {
        return Err(Error::Contract(format!("temperature {t} must be positive")));
    }
    let tree = CayleyTree::new(depth)?;
    let records = (0..n_instances as u64)
        .into_par_iter()
        .map(|i| {
            let s = instance_seed(seed, i);
            let fields = sample_boundary_fields(s, &tree);
            let sol = solve_instance(b, 1.0 / t, &tree, &fields)?;
            Ok(InstanceRecord { index: i, seed: s, fields_sha256: fields_hash(&fields), sz: sol.sz, bp_error: sol.error_estimate })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(records))
}

fn summarize(records: Vec<InstanceRecord>) -> QuenchResult {
    let n = records.len() as f64;
    let per_instance: Vec<f64> = records.iter().map(|r| r.sz).collect();
    let sq: Vec<f64> = per_instance.iter().map(|s| s * s).collect();
    let q_ea = sq.iter().sum::<f64>() / n;
    let stderr = if records.len() > 1 {
        let var = sq.iter().map(|x| (x - q_ea).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let bp_error = records.iter().map(|r| r.bp_error).sum::<f64>() / n;
    QuenchResult { q_ea, per_instance, stderr, bp_error, records }
}
