use alloc::vec;
use alloc::vec::Vec;

use super::{bfs_from, EmbodimentGraph};

/// Hop-count distance matrices between every pair of joints.
///
/// `spd` treats directed and root edges alike as undirected. `parent[i][j]`
/// holds `spd[i][j]` when `i` is a proper ancestor of `j` along the directed
/// edges, and `child[i][j]` holds it when `i` is a proper descendant of `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMaps {
    n: usize,
    spd: Vec<u32>,
    parent: Vec<u32>,
    child: Vec<u32>,
}

impl DistanceMaps {
    /// Value used for pairs that are unreachable, and for padding rows.
    pub const UNREACHABLE: u32 = u32::MAX;

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn spd(&self, i: usize, j: usize) -> u32 {
        self.spd[i * self.n + j]
    }

    #[inline]
    pub fn parent(&self, i: usize, j: usize) -> u32 {
        self.parent[i * self.n + j]
    }

    #[inline]
    pub fn child(&self, i: usize, j: usize) -> u32 {
        self.child[i * self.n + j]
    }

    pub fn max_spd(&self) -> u32 {
        self.spd.iter().copied().filter(|&d| d != Self::UNREACHABLE).max().unwrap_or(0)
    }

    /// Builds maps from raw row-major matrices. Used by tests and oracles.
    pub fn from_raw(n: usize, spd: Vec<u32>, parent: Vec<u32>, child: Vec<u32>) -> Self {
        assert!(spd.len() == n * n && parent.len() == n * n && child.len() == n * n);
        Self { n, spd, parent, child }
    }

    /// Maps of the relabeled graph where old joint `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut out = Self::from_raw(n, vec![0; n * n], vec![0; n * n], vec![0; n * n]);
        for i in 0..n {
            for j in 0..n {
                let dst = perm[i] * n + perm[j];
                out.spd[dst] = self.spd(i, j);
                out.parent[dst] = self.parent(i, j);
                out.child[dst] = self.child(i, j);
            }
        }
        out
    }

    /// Extends to `size` joints. Padding entries hold [`Self::UNREACHABLE`] in
    /// `spd` and zero in the directed maps; they are ignored under the mask.
    pub fn padded(&self, size: usize) -> Self {
        assert!(size >= self.n);
        let mut spd = vec![Self::UNREACHABLE; size * size];
        let mut parent = vec![0; size * size];
        let mut child = vec![0; size * size];
        for i in 0..self.n {
            for j in 0..self.n {
                spd[i * size + j] = self.spd(i, j);
                parent[i * size + j] = self.parent(i, j);
                child[i * size + j] = self.child(i, j);
            }
        }
        Self { n: size, spd, parent, child }
    }
}

pub fn compute_distance_maps(graph: &EmbodimentGraph) -> DistanceMaps {
    let n = graph.num_joints();
    let adj = graph.undirected_neighbors();
    let mut spd = vec![DistanceMaps::UNREACHABLE; n * n];
    for s in 0..n {
        for (t, d) in bfs_from(&adj, s).into_iter().enumerate() {
            if let Some(d) = d {
                spd[s * n + t] = d;
            }
        }
    }
    let mut parent = vec![0; n * n];
    let mut child = vec![0; n * n];
    for j in 0..n {
        // Every proper ancestor `a` of `j` is a parent of `j` at distance spd.
        for &a in graph.ancestry(j).iter().skip(1) {
            let d = spd[a * n + j];
            parent[a * n + j] = d;
            child[j * n + a] = d;
        }
    }
    DistanceMaps { n, spd, parent, child }
}
