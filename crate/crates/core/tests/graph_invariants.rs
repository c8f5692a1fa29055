use getzero_core::bench::fk_oracle;
use getzero_core::graph::{compute_distance_maps, dfs_linearize, DfsOrder};
use getzero_core::tokenizer::{build_tokens, token_width, ObservationFrame};
use getzero_core::{EmbodimentGraph, JointSpec};
use proptest::prelude::*;

/// Forest from parent choices: `picks[i] <= i`, where `picks[i] == i` starts
/// a new chain. Roots are linked in order of appearance.
fn forest(picks: &[usize], perm: &[usize]) -> EmbodimentGraph {
    let n = picks.len() + 1;
    let mut edges = Vec::new();
    let mut roots = vec![perm[0]];
    for (k, &p) in picks.iter().enumerate() {
        let i = k + 1;
        if p == i {
            roots.push(perm[i]);
        } else {
            edges.push((perm[p], perm[i]));
        }
    }
    let root_edges = roots.windows(2).map(|w| (w[0], w[1])).collect();
    let joints = (0..n).map(|i| JointSpec::new([0.1 * i as f64, 0.05], 0.2 + 0.01 * i as f64, -1.0, 1.0)).collect();
    EmbodimentGraph::new("f", joints, edges, root_edges).unwrap()
}

fn graph_strategy() -> impl Strategy<Value = EmbodimentGraph> {
    (1usize..10)
        .prop_flat_map(|n| {
            let picks: Vec<_> = (1..n).map(|i| 0..=i).collect();
            (picks, Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        })
        .prop_map(|(picks, perm)| forest(&picks, &perm))
}

fn shuffled(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #[test]
    fn relabeling_permutes_distance_maps((g, perm) in graph_strategy().prop_flat_map(|g| {
        let n = g.num_joints();
        (Just(g), shuffled(n))
    })) {
        let relabeled = compute_distance_maps(&g.relabeled(&perm).unwrap());
        prop_assert_eq!(relabeled, compute_distance_maps(&g).permuted(&perm));
    }

    #[test]
    fn spd_is_a_symmetric_metric(g in graph_strategy()) {
        let m = compute_distance_maps(&g);
        let n = g.num_joints();
        for i in 0..n {
            prop_assert_eq!(m.spd(i, i), 0);
            for j in 0..n {
                prop_assert_eq!(m.spd(i, j), m.spd(j, i));
                prop_assert_eq!(m.parent(i, j), m.child(j, i));
                for k in 0..n {
                    prop_assert!(m.spd(i, j) <= m.spd(i, k) + m.spd(k, j));
                }
            }
        }
    }

    #[test]
    fn dfs_visits_every_joint_once_with_parents_first(g in graph_strategy(), reversed in any::<bool>()) {
        let order = if reversed { DfsOrder::Reversed } else { DfsOrder::Canonical };
        let seq = dfs_linearize(&g, order);
        let mut seen = vec![false; g.num_joints()];
        for &j in &seq {
            prop_assert!(!seen[j]);
            if let Some(p) = g.parent(j) {
                prop_assert!(seen[p]);
            }
            seen[j] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn tokens_have_declared_width(g in graph_strategy(), h in 0usize..4, phase in 0.0f64..1.0) {
        let n = g.num_joints();
        let frame = ObservationFrame { joint_angles: vec![0.1; n], target_states: vec![0.2; n], phase };
        let tokens = build_tokens(&g, &vec![frame; h + 1], h).unwrap();
        prop_assert_eq!(tokens.len(), n * token_width(h));
        prop_assert!(tokens.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn fk_preserves_offset_and_link_lengths(g in graph_strategy(), q in prop::collection::vec(-1.0f64..1.0, 10)) {
        let n = g.num_joints();
        let fk = fk_oracle(&g, &q[..n]);
        let flat = fk.flat_joints();
        prop_assert_eq!(flat.len(), 2 * n);
        for j in 0..n {
            let [x, y] = [flat[2 * j], flat[2 * j + 1]];
            prop_assert!(x.is_finite() && y.is_finite());
            for &c in g.children(j) {
                let d = (flat[2 * c] - x).hypot(flat[2 * c + 1] - y);
                let [ox, oy] = g.joint(c).offset_from_parent;
                let want = ox.hypot(oy);
                prop_assert!((d - want).abs() < 1e-9, "{} vs {}", d, want);
            }
        }
        for (tip, l) in fk.tips.iter().zip(g.leaves()) {
            let d = (tip[0] - fk.joints[l][0]).hypot(tip[1] - fk.joints[l][1]);
            prop_assert!((d - g.joint(l).link_length).abs() < 1e-9);
        }
    }
}
