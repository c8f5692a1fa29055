//! Damped-least-squares fingertip expert.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::fk::{fk_oracle, jacobian_column};
use crate::graph::EmbodimentGraph;
use crate::tokenizer::ObservationFrame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub damping: f64,
    pub max_delta: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { damping: 0.1, max_delta: 0.1 }
    }
}

/// Solves `a x = b` for symmetric positive definite `a` (row-major `n x n`).
fn cholesky_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        let d = crate::math::sqrt(d.max(f64::MIN_POSITIVE));
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        for k in 0..i {
            b[i] -= a[i * n + k] * b[k];
        }
        b[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            b[i] -= a[k * n + i] * b[k];
        }
        b[i] /= a[i * n + i];
    }
    b
}

/// One expert step. `goals` holds one point per leaf in
/// [`EmbodimentGraph::leaves`] order. Each chain is solved on its own with
/// `dq = J^T (J J^T + damping^2 I)^-1 e`; the step is clipped to
/// `max_delta` and the resulting target is projected onto the joint limits.
/// The returned delta is the projected target minus the current target.
pub fn expert_policy(graph: &EmbodimentGraph, frame: &ObservationFrame, goals: &[[f64; 2]], cfg: &ExpertConfig) -> Vec<f64> {
    let n = graph.num_joints();
    let fk = fk_oracle(graph, &frame.joint_angles);
    let leaves = graph.leaves();
    assert_eq!(goals.len(), leaves.len(), "one goal per leaf");
    let mut dq = vec![0.0; n];
    for root in graph.roots() {
        let members: Vec<usize> = (0..n).filter(|&j| graph.chain_root(j) == root).collect();
        let tips: Vec<usize> = (0..leaves.len()).filter(|&t| graph.chain_root(leaves[t]) == root).collect();
        let (m, rows) = (members.len(), 2 * tips.len());
        let mut jac = vec![0.0; rows * m];
        let mut err = vec![0.0; rows];
        for (r, &t) in tips.iter().enumerate() {
            let tip = fk.tips[t];
            err[2 * r] = goals[t][0] - tip[0];
            err[2 * r + 1] = goals[t][1] - tip[1];
            for a in graph.ancestry(leaves[t]) {
                let c = members.iter().position(|&x| x == a).expect("ancestor in chain");
                let col = jacobian_column(&fk, a, tip);
                jac[2 * r * m + c] = col[0];
                jac[(2 * r + 1) * m + c] = col[1];
            }
        }
        let mut a = vec![0.0; rows * rows];
        for i in 0..rows {
            for k in 0..rows {
                a[i * rows + k] = (0..m).map(|c| jac[i * m + c] * jac[k * m + c]).sum();
            }
            a[i * rows + i] += cfg.damping * cfg.damping;
        }
        let y = cholesky_solve(a, err, rows);
        for (c, &j) in members.iter().enumerate() {
            dq[j] = (0..rows).map(|i| jac[i * m + c] * y[i]).sum();
        }
    }
    (0..n)
        .map(|j| {
            let (lo, hi) = graph.joint(j).joint_limit;
            let step = dq[j].clamp(-cfg.max_delta, cfg.max_delta);
            let old = frame.target_states[j];
            (old + step).clamp(lo, hi) - old
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::{chain, chains};
    use crate::numerics::rng::stream;
    use rand::Rng;

    fn frame(q: &[f64]) -> ObservationFrame {
        ObservationFrame { joint_angles: q.to_vec(), target_states: q.to_vec(), phase: 0.0 }
    }

    fn tip_error(g: &EmbodimentGraph, q: &[f64], goals: &[[f64; 2]]) -> f64 {
        let fk = fk_oracle(g, q);
        fk.tips.iter().zip(goals).map(|(t, g)| libm::hypot(t[0] - g[0], t[1] - g[1])).sum()
    }

    #[test]
    fn at_target_no_motion() {
        let g = chains(&[3, 2]);
        let q = [0.2, 0.1, -0.3, 0.4, 0.0];
        let goals = fk_oracle(&g, &q).tips;
        let d = expert_policy(&g, &frame(&q), &goals, &ExpertConfig::default());
        assert!(d.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn single_joint_small_rotation() {
        let g = chain(1);
        let cfg = ExpertConfig { damping: 1e-8, max_delta: 0.1 };
        let d = expert_policy(&g, &frame(&[0.0]), &[[libm::cos(0.1), libm::sin(0.1)]], &cfg);
        assert!((d[0] - 0.1).abs() < 1e-2, "{}", d[0]);
    }

    #[test]
    fn clipping_and_limits() {
        let g = chain(1);
        let cfg = ExpertConfig::default();
        let d = expert_policy(&g, &frame(&[0.0]), &[[0.0, 1.0]], &cfg);
        assert!((d[0] - 0.1).abs() < 1e-15);
        let d = expert_policy(&g, &frame(&[1.95]), &[[-1.0, 0.0]], &cfg);
        assert!((d[0] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn small_steps_reduce_error() {
        let g = chains(&[3, 2, 4]);
        let cfg = ExpertConfig::default();
        for seed in 0..300 {
            let mut r = stream(seed, 0);
            let q: Vec<f64> = (0..g.num_joints()).map(|_| r.random_range(-1.0..1.0)).collect();
            let goals: Vec<[f64; 2]> = fk_oracle(&g, &q)
                .tips
                .iter()
                .map(|t| [t[0] + r.random_range(-0.02..0.02), t[1] + r.random_range(-0.02..0.02)])
                .collect();
            let before = tip_error(&g, &q, &goals);
            let d = expert_policy(&g, &frame(&q), &goals, &cfg);
            let after: Vec<f64> = q.iter().zip(&d).map(|(a, b)| a + b).collect();
            assert!(tip_error(&g, &after, &goals) <= before + 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn chains_are_solved_independently() {
        let g = chains(&[2, 2]);
        let q = [0.3, 0.2, -0.1, 0.4];
        let fk = fk_oracle(&g, &q);
        let goals = [[fk.tips[0][0] + 0.05, fk.tips[0][1]], fk.tips[1]];
        let d = expert_policy(&g, &frame(&q), &goals, &ExpertConfig::default());
        assert!(d[0] != 0.0 && d[1] != 0.0);
        assert!(d[2].abs() < 1e-15 && d[3].abs() < 1e-15);
    }
}
