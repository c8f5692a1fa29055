//! Embodiment graphs.
//!
//! An embodiment is a forest of revolute joints. Directed edges run from a
//! parent joint to its child along a serial chain; undirected root edges tie
//! the first joints of independent chains together so the whole hand forms a
//! single connected component.

mod distance;
mod enumerate;

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use distance::{compute_distance_maps, DistanceMaps};
pub use enumerate::{
    enumerate_hand_variants, enumeration_report, EnumerationReport, FilterRules, FingerCatalog,
    FingerVariant, TwoJointRule,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("embodiment must have at least one joint")]
    Empty,
    #[error("edge ({0}, {1}) references a joint outside 0..{2}")]
    IndexOutOfRange(usize, usize, usize),
    #[error("joint {0} has more than one parent")]
    MultipleParents(usize),
    #[error("directed edges contain a cycle through joint {0}")]
    Cycle(usize),
    #[error("root edge ({0}, {1}) touches a joint that has a parent")]
    RootEdgeOnChild(usize, usize),
    #[error("graph is disconnected: joint {0} unreachable from joint 0")]
    Disconnected(usize),
    #[error("joint {0}: {1}")]
    BadJoint(usize, &'static str),
    #[error("catalog has no variants for a finger slot")]
    EmptyCatalog,
    #[error("link extension must be non-negative, got {0}")]
    NegativeExtension(f64),
}

/// Geometry and limits of a single revolute joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    /// Offset from the parent joint in the parent's frame; for a root joint,
    /// its base position.
    pub offset_from_parent: [f64; 2],
    /// Length of the link leaving this joint along its local x axis.
    pub link_length: f64,
    /// Lower and upper angle limit in radians.
    pub joint_limit: (f64, f64),
}

impl JointSpec {
    pub fn new(offset: [f64; 2], link_length: f64, lo: f64, hi: f64) -> Self {
        Self { offset_from_parent: offset, link_length, joint_limit: (lo, hi) }
    }

    fn validate(&self, index: usize) -> Result<(), GraphError> {
        let finite = self.offset_from_parent.iter().all(|v| v.is_finite())
            && self.link_length.is_finite()
            && self.joint_limit.0.is_finite()
            && self.joint_limit.1.is_finite();
        if !finite {
            return Err(GraphError::BadJoint(index, "non-finite geometry"));
        }
        if self.link_length < 0.0 {
            return Err(GraphError::BadJoint(index, "negative link length"));
        }
        if self.joint_limit.0 >= self.joint_limit.1 {
            return Err(GraphError::BadJoint(index, "joint limit lo must be below hi"));
        }
        Ok(())
    }
}

/// Unvalidated serialized form of an [`EmbodimentGraph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub directed_edges: Vec<(usize, usize)>,
    pub root_edges: Vec<(usize, usize)>,
}

/// Validated, immutable embodiment graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphSpec", into = "GraphSpec")]
pub struct EmbodimentGraph {
    name: String,
    joints: Vec<JointSpec>,
    directed_edges: Vec<(usize, usize)>,
    root_edges: Vec<(usize, usize)>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
}

impl TryFrom<GraphSpec> for EmbodimentGraph {
    type Error = GraphError;
    fn try_from(s: GraphSpec) -> Result<Self, GraphError> {
        Self::new(s.name, s.joints, s.directed_edges, s.root_edges)
    }
}

impl From<EmbodimentGraph> for GraphSpec {
    fn from(g: EmbodimentGraph) -> Self {
        Self { name: g.name, joints: g.joints, directed_edges: g.directed_edges, root_edges: g.root_edges }
    }
}

impl EmbodimentGraph {
    pub fn new(
        name: impl Into<String>,
        joints: Vec<JointSpec>,
        directed_edges: Vec<(usize, usize)>,
        root_edges: Vec<(usize, usize)>,
    ) -> Result<Self, GraphError> {
        let n = joints.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        for (i, j) in joints.iter().enumerate() {
            j.validate(i)?;
        }
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        for &(p, c) in &directed_edges {
            if p >= n || c >= n {
                return Err(GraphError::IndexOutOfRange(p, c, n));
            }
            if p == c {
                return Err(GraphError::Cycle(p));
            }
            if parent[c].is_some() {
                return Err(GraphError::MultipleParents(c));
            }
            parent[c] = Some(p);
            children[p].push(c);
        }
        for ch in children.iter_mut() {
            ch.sort_unstable();
        }
        // With at most one parent per joint, a cycle shows up as a walk up the
        // parent pointers that never reaches a root.
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(GraphError::Cycle(start));
                }
            }
        }
        for &(a, b) in &root_edges {
            if a >= n || b >= n {
                return Err(GraphError::IndexOutOfRange(a, b, n));
            }
            if parent[a].is_some() || parent[b].is_some() {
                return Err(GraphError::RootEdgeOnChild(a, b));
            }
        }
        let graph = Self { name: name.into(), joints, directed_edges, root_edges, parent, children };
        let reach = graph.undirected_bfs(0);
        if let Some(j) = reach.iter().position(|d| d.is_none()) {
            return Err(GraphError::Disconnected(j));
        }
        Ok(graph)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn joint(&self, index: usize) -> &JointSpec {
        &self.joints[index]
    }

    pub fn directed_edges(&self) -> &[(usize, usize)] {
        &self.directed_edges
    }

    pub fn root_edges(&self) -> &[(usize, usize)] {
        &self.root_edges
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    /// Children of `joint` in ascending index order.
    pub fn children(&self, joint: usize) -> &[usize] {
        &self.children[joint]
    }

    /// Joints without a parent, ascending.
    pub fn roots(&self) -> Vec<usize> {
        (0..self.num_joints()).filter(|&j| self.parent[j].is_none()).collect()
    }

    /// Joints without children, ascending. Each carries a fingertip.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.num_joints()).filter(|&j| self.children[j].is_empty()).collect()
    }

    /// Root joint of the chain containing `joint`.
    pub fn chain_root(&self, joint: usize) -> usize {
        let mut cur = joint;
        while let Some(p) = self.parent[cur] {
            cur = p;
        }
        cur
    }

    /// `joint` followed by its ancestors up to the chain root.
    pub fn ancestry(&self, joint: usize) -> Vec<usize> {
        let mut out = vec![joint];
        let mut cur = joint;
        while let Some(p) = self.parent[cur] {
            out.push(p);
            cur = p;
        }
        out
    }

    pub fn with_name(&self, name: impl Into<String>) -> Self {
        let mut g = self.clone();
        g.name = name.into();
        g
    }

    /// Relabels joints: old joint `i` becomes joint `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let n = self.num_joints();
        assert_eq!(perm.len(), n, "permutation length must equal joint count");
        let mut joints = vec![self.joints[0].clone(); n];
        for (old, j) in self.joints.iter().enumerate() {
            joints[perm[old]] = j.clone();
        }
        let directed = self.directed_edges.iter().map(|&(p, c)| (perm[p], perm[c])).collect();
        let roots = self.root_edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        Self::new(self.name.clone(), joints, directed, roots)
    }

    pub(crate) fn undirected_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_joints()];
        for &(a, b) in self.directed_edges.iter().chain(self.root_edges.iter()) {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub(crate) fn undirected_bfs(&self, source: usize) -> Vec<Option<u32>> {
        let adj = self.undirected_neighbors();
        bfs_from(&adj, source)
    }

    /// Longest shortest-path distance between any two joints.
    pub fn diameter(&self) -> u32 {
        let maps = compute_distance_maps(self);
        maps.max_spd()
    }
}

pub(crate) fn bfs_from(adj: &[Vec<usize>], source: usize) -> Vec<Option<u32>> {
    let mut dist = vec![None; adj.len()];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap_or(0);
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Tie-breaking rule for [`dfs_linearize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfsOrder {
    /// Chains in ascending root index, children in ascending index.
    #[default]
    Canonical,
    /// Chains in descending root index, children in descending index.
    Reversed,
}

/// Depth-first visiting order of all joints.
pub fn dfs_linearize(graph: &EmbodimentGraph, order: DfsOrder) -> Vec<usize> {
    let mut roots = graph.roots();
    if order == DfsOrder::Reversed {
        roots.reverse();
    }
    let mut out = Vec::with_capacity(graph.num_joints());
    let mut stack: Vec<usize> = Vec::new();
    for r in roots {
        stack.push(r);
        while let Some(u) = stack.pop() {
            out.push(u);
            let ch = graph.children(u);
            // The stack pops in reverse, so push the preferred child last.
            match order {
                DfsOrder::Canonical => stack.extend(ch.iter().rev()),
                DfsOrder::Reversed => stack.extend(ch.iter()),
            }
        }
    }
    out
}

/// Rank of every joint in its DFS sequence (`ranks[joint] = position`).
pub fn dfs_positions(graph: &EmbodimentGraph, order: DfsOrder) -> Vec<usize> {
    let seq = dfs_linearize(graph, order);
    let mut ranks = vec![0; seq.len()];
    for (pos, &j) in seq.iter().enumerate() {
        ranks[j] = pos;
    }
    ranks
}

/// Lengthens the link leaving each named joint by `delta`.
///
/// Children of an extended joint are pushed out along their existing offset
/// direction; a leaf's fingertip segment grows directly. Structure is
/// untouched.
pub fn apply_link_extension(
    graph: &EmbodimentGraph,
    joint_indices: &[usize],
    delta: f64,
) -> Result<EmbodimentGraph, GraphError> {
    if !(delta >= 0.0) {
        return Err(GraphError::NegativeExtension(delta));
    }
    let n = graph.num_joints();
    let mut joints = graph.joints.clone();
    for &j in joint_indices {
        if j >= n {
            return Err(GraphError::IndexOutOfRange(j, j, n));
        }
        joints[j].link_length += delta;
        for &c in graph.children(j) {
            let [x, y] = joints[c].offset_from_parent;
            let norm = crate::math::hypot(x, y);
            joints[c].offset_from_parent = if norm > 0.0 {
                let s = (norm + delta) / norm;
                [x * s, y * s]
            } else {
                [delta, 0.0]
            };
        }
    }
    EmbodimentGraph::new(
        graph.name.clone(),
        joints,
        graph.directed_edges.clone(),
        graph.root_edges.clone(),
    )
}

/// Unit-link serial chains for tests and examples.
pub mod fixtures {
    use super::*;

    pub fn unit_joint() -> JointSpec {
        JointSpec::new([1.0, 0.0], 1.0, -2.0, 2.0)
    }

    /// Straight chain of `n` unit links rooted at the origin.
    pub fn chain(n: usize) -> EmbodimentGraph {
        let mut joints = vec![unit_joint(); n];
        joints[0].offset_from_parent = [0.0, 0.0];
        let edges = (1..n).map(|i| (i - 1, i)).collect();
        EmbodimentGraph::new("chain", joints, edges, vec![]).unwrap()
    }

    /// Independent chains with the given lengths, roots linked in a path.
    pub fn chains(lengths: &[usize]) -> EmbodimentGraph {
        let mut joints = Vec::new();
        let mut edges = Vec::new();
        let mut roots = Vec::new();
        for (c, &len) in lengths.iter().enumerate() {
            let base = joints.len();
            for k in 0..len {
                let mut j = unit_joint();
                if k == 0 {
                    j.offset_from_parent = [0.0, c as f64];
                    roots.push(base);
                } else {
                    edges.push((base + k - 1, base + k));
                }
                joints.push(j);
            }
        }
        let root_edges = roots.windows(2).map(|w| (w[0], w[1])).collect();
        EmbodimentGraph::new("chains", joints, edges, root_edges).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn rejects_structural_violations() {
        let j = unit_joint();
        assert_eq!(EmbodimentGraph::new("e", vec![], vec![], vec![]), Err(GraphError::Empty));
        assert_eq!(
            EmbodimentGraph::new("d", vec![j.clone(), j.clone()], vec![], vec![]),
            Err(GraphError::Disconnected(1))
        );
        assert_eq!(
            EmbodimentGraph::new("c", vec![j.clone(); 2], vec![(0, 1), (1, 0)], vec![]),
            Err(GraphError::Cycle(0))
        );
        assert!(matches!(
            EmbodimentGraph::new("m", vec![j.clone(); 3], vec![(0, 2), (1, 2)], vec![(0, 1)]),
            Err(GraphError::MultipleParents(2))
        ));
        assert!(matches!(
            EmbodimentGraph::new("r", vec![j.clone(); 3], vec![(0, 1)], vec![(1, 2)]),
            Err(GraphError::RootEdgeOnChild(1, 2))
        ));
        assert!(matches!(
            EmbodimentGraph::new("o", vec![j.clone(); 2], vec![(0, 5)], vec![]),
            Err(GraphError::IndexOutOfRange(0, 5, 2))
        ));
        let mut bad = j.clone();
        bad.joint_limit = (1.0, 1.0);
        assert!(matches!(
            EmbodimentGraph::new("l", vec![bad], vec![], vec![]),
            Err(GraphError::BadJoint(0, _))
        ));
    }

    #[test]
    fn cycle_without_double_parent_is_rejected() {
        let j = unit_joint();
        let r = EmbodimentGraph::new("c3", vec![j; 3], vec![(0, 1), (1, 2), (2, 0)], vec![]);
        assert!(matches!(r, Err(GraphError::Cycle(_))));
    }

    #[test]
    fn dfs_examples() {
        assert_eq!(dfs_linearize(&chain(3), DfsOrder::Canonical), vec![0, 1, 2]);
        assert_eq!(dfs_linearize(&chain(1), DfsOrder::Canonical), vec![0]);
        let two = chains(&[2, 2]);
        assert_eq!(dfs_linearize(&two, DfsOrder::Canonical), vec![0, 1, 2, 3]);
        assert_eq!(dfs_linearize(&two, DfsOrder::Reversed), vec![2, 3, 0, 1]);
    }

    #[test]
    fn dfs_on_branching_tree_respects_tie_break() {
        // 0 -> {1, 3}, 1 -> 2
        let j = unit_joint();
        let g = EmbodimentGraph::new("t", vec![j; 4], vec![(0, 3), (0, 1), (1, 2)], vec![]).unwrap();
        assert_eq!(dfs_linearize(&g, DfsOrder::Canonical), vec![0, 1, 2, 3]);
        assert_eq!(dfs_linearize(&g, DfsOrder::Reversed), vec![0, 3, 1, 2]);
        assert_eq!(dfs_positions(&g, DfsOrder::Reversed), vec![0, 2, 3, 1]);
    }

    #[test]
    fn dfs_is_not_relabel_equivariant() {
        let g = chains(&[2, 1]);
        // swap the chains' labels: old 0,1,2 -> new 1,2,0
        let perm = [1, 2, 0];
        let h = g.relabeled(&perm).unwrap();
        let relabeled_seq: Vec<usize> =
            dfs_linearize(&g, DfsOrder::Canonical).iter().map(|&j| perm[j]).collect();
        assert_ne!(dfs_linearize(&h, DfsOrder::Canonical), relabeled_seq);
    }

    #[test]
    fn zero_extension_is_identity() {
        let g = chains(&[3, 2]);
        assert_eq!(apply_link_extension(&g, &[0, 1, 4], 0.0).unwrap(), g);
    }

    #[test]
    fn extension_rejects_bad_input() {
        let g = chain(2);
        assert_eq!(apply_link_extension(&g, &[0], -0.1), Err(GraphError::NegativeExtension(-0.1)));
        assert!(matches!(apply_link_extension(&g, &[2], 0.1), Err(GraphError::IndexOutOfRange(..))));
    }

    #[test]
    fn extension_keeps_structure_and_grows_offsets() {
        let g = chain(2);
        let e = apply_link_extension(&g, &[0], 0.15).unwrap();
        assert!((e.joint(1).offset_from_parent[0] - 1.15).abs() < 1e-12);
        assert!((e.joint(0).link_length - 1.15).abs() < 1e-12);
        let e1 = apply_link_extension(&g, &[1], 0.15).unwrap();
        assert!((e1.joint(1).link_length - 1.15).abs() < 1e-12);
        assert_eq!(compute_distance_maps(&e), compute_distance_maps(&g));
        assert_eq!(compute_distance_maps(&e1), compute_distance_maps(&g));
    }
}
