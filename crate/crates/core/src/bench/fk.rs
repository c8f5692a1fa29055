//! Planar forward kinematics and the analytic fingertip Jacobian.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::EmbodimentGraph;
use crate::math;

/// Joint and fingertip positions in the base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Fk {
    pub joints: Vec<[f64; 2]>,
    /// One entry per leaf, in [`EmbodimentGraph::leaves`] order.
    pub tips: Vec<[f64; 2]>,
    /// Cumulative rotation of each joint's outgoing link.
    pub headings: Vec<f64>,
}

impl Fk {
    /// Joint positions flattened to `J x 2`.
    pub fn flat_joints(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }
}

fn rotate(v: [f64; 2], theta: f64) -> [f64; 2] {
    let (s, c) = (math::sin(theta), math::cos(theta));
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Serial-chain FK. Roots sit at their base offsets; every child offset and
/// every fingertip link is rotated by the accumulated angle of its parent.
///
/// # Panics
/// If `angles.len()` differs from the joint count.
pub fn fk_oracle(graph: &EmbodimentGraph, angles: &[f64]) -> Fk {
    let n = graph.num_joints();
    assert_eq!(angles.len(), n, "one angle per joint");
    let mut joints = vec![[0.0; 2]; n];
    let mut headings = vec![0.0; n];
    let mut stack = graph.roots();
    for &r in &stack {
        joints[r] = graph.joint(r).offset_from_parent;
        headings[r] = angles[r];
    }
    while let Some(p) = stack.pop() {
        for &c in graph.children(p) {
            let d = rotate(graph.joint(c).offset_from_parent, headings[p]);
            joints[c] = [joints[p][0] + d[0], joints[p][1] + d[1]];
            headings[c] = headings[p] + angles[c];
            stack.push(c);
        }
    }
    let tips = graph
        .leaves()
        .into_iter()
        .map(|l| {
            let d = rotate([graph.joint(l).link_length, 0.0], headings[l]);
            [joints[l][0] + d[0], joints[l][1] + d[1]]
        })
        .collect();
    Fk { joints, tips, headings }
}

/// Velocity of `tip` per unit rotation of `joint`.
pub(crate) fn jacobian_column(fk: &Fk, joint: usize, tip: [f64; 2]) -> [f64; 2] {
    let p = fk.joints[joint];
    [-(tip[1] - p[1]), tip[0] - p[0]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::{chain, chains};
    use crate::graph::JointSpec;
    use crate::numerics::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    /// Complex-number FK walking each ancestry path from the root.
    fn complex_fk(graph: &EmbodimentGraph, angles: &[f64]) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        type C = (f64, f64);
        let mul = |a: C, b: C| (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);
        let cis = |t: f64| (t.cos(), t.sin());
        let place = |j: usize| -> (C, C) {
            let mut path = graph.ancestry(j);
            path.reverse();
            let root = graph.joint(path[0]).offset_from_parent;
            let mut z: C = (root[0], root[1]);
            let mut rot = cis(angles[path[0]]);
            for &k in &path[1..] {
                let o = graph.joint(k).offset_from_parent;
                let d = mul(rot, (o[0], o[1]));
                z = (z.0 + d.0, z.1 + d.1);
                rot = mul(rot, cis(angles[k]));
            }
            (z, rot)
        };
        let joints = (0..graph.num_joints()).map(|j| place(j).0).map(|z| [z.0, z.1]).collect();
        let tips = graph
            .leaves()
            .into_iter()
            .map(|l| {
                let (z, rot) = place(l);
                let d = mul(rot, (graph.joint(l).link_length, 0.0));
                [z.0 + d.0, z.1 + d.1]
            })
            .collect();
        (joints, tips)
    }

    fn random_forest(seed: u64) -> EmbodimentGraph {
        let mut r = stream(seed, 0);
        let n = r.random_range(1..=8usize);
        let joints: Vec<JointSpec> = (0..n)
            .map(|_| {
                JointSpec::new(
                    [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                    r.random_range(0.05..1.0),
                    -2.0,
                    2.0,
                )
            })
            .collect();
        let mut edges = Vec::new();
        let mut roots = vec![0];
        for j in 1..n {
            if r.random_bool(0.25) {
                roots.push(j);
            } else {
                edges.push((r.random_range(0..j), j));
            }
        }
        let root_edges = roots.windows(2).map(|w| (w[0], w[1])).collect();
        EmbodimentGraph::new("rand", joints, edges, root_edges).unwrap()
    }

    #[test]
    fn matches_complex_rotation_oracle() {
        for seed in 0..1200 {
            let g = random_forest(seed);
            let mut r = stream(seed, 1);
            let angles: Vec<f64> = (0..g.num_joints()).map(|_| r.random_range(-3.0..3.0)).collect();
            let fk = fk_oracle(&g, &angles);
            let (joints, tips) = complex_fk(&g, &angles);
            for (a, b) in fk.joints.iter().chain(&fk.tips).zip(joints.iter().chain(&tips)) {
                assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rest_pose_of_unit_chain() {
        let fk = fk_oracle(&chain(4), &[0.0; 4]);
        for (k, p) in fk.joints.iter().enumerate() {
            assert_eq!(*p, [k as f64, 0.0]);
        }
        assert_eq!(fk.tips, vec![[4.0, 0.0]]);
    }

    #[test]
    fn quarter_turn_two_link() {
        let fk = fk_oracle(&chain(2), &[core::f64::consts::FRAC_PI_2, 0.0]);
        assert!((fk.joints[1][0]).abs() < 1e-15 && (fk.joints[1][1] - 1.0).abs() < 1e-15);
        assert!((fk.tips[0][0]).abs() < 1e-15 && (fk.tips[0][1] - 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn relabeled_fk_is_permuted_fk(seed in 0u64..500, angle in -2.0f64..2.0) {
            let g = chains(&[3, 2, 1]);
            let n = g.num_joints();
            let mut r = stream(seed, 2);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, r.random_range(0..=i));
            }
            let angles: Vec<f64> = (0..n).map(|i| angle * (i as f64 + 1.0) / n as f64).collect();
            let mut moved = vec![0.0; n];
            for (old, &new) in perm.iter().enumerate() {
                moved[new] = angles[old];
            }
            let a = fk_oracle(&g, &angles);
            let b = fk_oracle(&g.relabeled(&perm).unwrap(), &moved);
            for (old, &new) in perm.iter().enumerate() {
                prop_assert_eq!(a.joints[old], b.joints[new]);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let g = chains(&[3, 2]);
        let q = [0.3, -0.2, 0.5, 0.1, 0.7];
        let fk = fk_oracle(&g, &q);
        for (ti, &leaf) in g.leaves().iter().enumerate() {
            for j in 0..g.num_joints() {
                let mut qp = q;
                qp[j] += 1e-6;
                let mut qm = q;
                qm[j] -= 1e-6;
                let (tp, tm) = (fk_oracle(&g, &qp).tips[ti], fk_oracle(&g, &qm).tips[ti]);
                let fd = [(tp[0] - tm[0]) / 2e-6, (tp[1] - tm[1]) / 2e-6];
                let col = if g.ancestry(leaf).contains(&j) { jacobian_column(&fk, j, fk.tips[ti]) } else { [0.0; 2] };
                assert!((fd[0] - col[0]).abs() < 1e-6 && (fd[1] - col[1]).abs() < 1e-6);
            }
        }
    }
}
