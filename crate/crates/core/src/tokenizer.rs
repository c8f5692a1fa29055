//! Per-joint tokens and padded batches.
//!
//! Token `j` concatenates, in order: sin/cos of the cycle phase for each
//! history frame, the task id, the normalized angle and target of joint `j`
//! for each history frame, and the joint's fixed geometry block.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{compute_distance_maps, dfs_positions, DfsOrder, DistanceMaps, EmbodimentGraph};
use crate::math;

/// Width of the fixed-local block: offset (2), offset angle, link length,
/// limits (2), chain-root base position (2).
pub const FIXED_LOCAL_WIDTH: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("frame has {got} joints, embodiment has {want}")]
    JointCount { got: usize, want: usize },
    #[error("phase {0} outside [0, 1)")]
    Phase(f64),
    #[error("label has {got} entries, expected {want}")]
    LabelShape { got: usize, want: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// Proprioceptive state at one control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    /// Joint angles in radians.
    pub joint_angles: Vec<f64>,
    /// Running joint targets in radians.
    pub target_states: Vec<f64>,
    /// Cycle progression in `[0, 1)`.
    pub phase: f64,
}

/// Token width for `history` past frames.
pub const fn token_width(history: usize) -> usize {
    4 * (history + 1) + 1 + FIXED_LOCAL_WIDTH
}

fn normalize(q: f64, lo: f64, hi: f64) -> f64 {
    2.0 * (q - lo) / (hi - lo) - 1.0
}

/// Fixed-local block of every joint, row-major `J x FIXED_LOCAL_WIDTH`.
pub fn fixed_local_block(graph: &EmbodimentGraph) -> Vec<f64> {
    let mut out = Vec::with_capacity(graph.num_joints() * FIXED_LOCAL_WIDTH);
    for (j, spec) in graph.joints().iter().enumerate() {
        let [ox, oy] = spec.offset_from_parent;
        let base = graph.joint(graph.chain_root(j)).offset_from_parent;
        out.extend_from_slice(&[
            ox,
            oy,
            math::atan2(oy, ox),
            spec.link_length,
            spec.joint_limit.0,
            spec.joint_limit.1,
            base[0],
            base[1],
        ]);
    }
    out
}

/// `J x token_width(h)` token matrix. `history` is newest first; frames
/// missing at an episode start repeat the oldest one provided.
pub fn build_tokens(graph: &EmbodimentGraph, history: &[ObservationFrame], h: usize) -> Result<Vec<f64>, TokenError> {
    let fixed = fixed_local_block(graph);
    build_tokens_with(graph, &fixed, history, h)
}

fn build_tokens_with(
    graph: &EmbodimentGraph,
    fixed: &[f64],
    history: &[ObservationFrame],
    h: usize,
) -> Result<Vec<f64>, TokenError> {
    let oldest = history.last().ok_or(TokenError::EmptyHistory)?;
    let nj = graph.num_joints();
    for f in history {
        if f.joint_angles.len() != nj || f.target_states.len() != nj {
            return Err(TokenError::JointCount { got: f.joint_angles.len().min(f.target_states.len()), want: nj });
        }
        if !(0.0..1.0).contains(&f.phase) {
            return Err(TokenError::Phase(f.phase));
        }
    }
    let frame = |k: usize| history.get(k).unwrap_or(oldest);
    let width = token_width(h);
    let mut out = Vec::with_capacity(nj * width);
    for j in 0..nj {
        let (lo, hi) = graph.joint(j).joint_limit;
        for k in 0..=h {
            let angle = math::TAU * frame(k).phase;
            out.push(math::sin(angle));
            out.push(math::cos(angle));
        }
        out.push(0.0);
        for k in 0..=h {
            let f = frame(k);
            out.push(normalize(f.joint_angles[j], lo, hi));
            out.push(normalize(f.target_states[j], lo, hi));
        }
        out.extend_from_slice(&fixed[j * FIXED_LOCAL_WIDTH..(j + 1) * FIXED_LOCAL_WIDTH]);
    }
    debug_assert_eq!(out.len(), nj * width);
    Ok(out)
}

/// Graph plus everything derived from it that batching needs.
#[derive(Debug, Clone)]
pub struct PreparedEmbodiment {
    pub graph: EmbodimentGraph,
    pub maps: DistanceMaps,
    pub dfs_canonical: Vec<usize>,
    pub dfs_reversed: Vec<usize>,
    fixed: Vec<f64>,
}

impl PreparedEmbodiment {
    pub fn new(graph: EmbodimentGraph) -> Self {
        let maps = compute_distance_maps(&graph);
        let dfs_canonical = dfs_positions(&graph, DfsOrder::Canonical);
        let dfs_reversed = dfs_positions(&graph, DfsOrder::Reversed);
        let fixed = fixed_local_block(&graph);
        Self { graph, maps, dfs_canonical, dfs_reversed, fixed }
    }

    pub fn num_joints(&self) -> usize {
        self.graph.num_joints()
    }

    pub fn dfs(&self, order: DfsOrder) -> &[usize] {
        match order {
            DfsOrder::Canonical => &self.dfs_canonical,
            DfsOrder::Reversed => &self.dfs_reversed,
        }
    }

    pub fn tokens(&self, history: &[ObservationFrame], h: usize) -> Result<Vec<f64>, TokenError> {
        build_tokens_with(&self.graph, &self.fixed, history, h)
    }
}

/// Supervision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    /// Expert delta targets, one per joint.
    pub actions: Vec<f64>,
    /// Joint positions in the base frame, `J x 2` row-major.
    pub fk: Vec<f64>,
}

pub struct Sample<'a> {
    pub embodiment: &'a PreparedEmbodiment,
    pub history: &'a [ObservationFrame],
    pub labels: Option<Labels>,
}

/// Padded batch. Padding rows of `tokens` are zero and masked out.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub batch: usize,
    pub max_joints: usize,
    pub width: usize,
    /// `B x J_max x F`.
    pub tokens: Vec<f64>,
    /// `B x J_max`, true for real joints.
    pub mask: Vec<bool>,
    pub joint_counts: Vec<usize>,
    /// Per-sample maps padded to `J_max`.
    pub distance_maps: Vec<DistanceMaps>,
    /// `B x J_max` DFS ranks; padding holds rank 0.
    pub dfs_positions: Vec<usize>,
    /// `B x J_max` expert actions, zero in padding. Present when every
    /// sample carried labels.
    pub actions: Option<Vec<f64>>,
    /// `B x J_max x 2` FK targets, zero in padding.
    pub fk: Option<Vec<f64>>,
}

impl TokenBatch {
    pub fn is_real(&self, b: usize, j: usize) -> bool {
        self.mask[b * self.max_joints + j]
    }
}

pub fn collate(samples: &[Sample<'_>], h: usize, dfs_order: DfsOrder) -> Result<TokenBatch, TokenError> {
    if samples.is_empty() {
        return Err(TokenError::EmptyBatch);
    }
    let width = token_width(h);
    let jmax = samples.iter().map(|s| s.embodiment.num_joints()).max().unwrap_or(0);
    let bsz = samples.len();
    let mut tokens = vec![0.0; bsz * jmax * width];
    let mut mask = vec![false; bsz * jmax];
    let mut dfs = vec![0usize; bsz * jmax];
    let mut maps = Vec::with_capacity(bsz);
    let mut counts = Vec::with_capacity(bsz);
    let labelled = samples.iter().all(|s| s.labels.is_some());
    let mut actions = vec![0.0; if labelled { bsz * jmax } else { 0 }];
    let mut fk = vec![0.0; if labelled { bsz * jmax * 2 } else { 0 }];
    for (b, s) in samples.iter().enumerate() {
        let nj = s.embodiment.num_joints();
        let t = s.embodiment.tokens(s.history, h)?;
        tokens[b * jmax * width..b * jmax * width + nj * width].copy_from_slice(&t);
        mask[b * jmax..b * jmax + nj].iter_mut().for_each(|m| *m = true);
        dfs[b * jmax..b * jmax + nj].copy_from_slice(s.embodiment.dfs(dfs_order));
        maps.push(s.embodiment.maps.padded(jmax));
        counts.push(nj);
        if let (true, Some(l)) = (labelled, &s.labels) {
            if l.actions.len() != nj {
                return Err(TokenError::LabelShape { got: l.actions.len(), want: nj });
            }
            if l.fk.len() != 2 * nj {
                return Err(TokenError::LabelShape { got: l.fk.len(), want: 2 * nj });
            }
            actions[b * jmax..b * jmax + nj].copy_from_slice(&l.actions);
            fk[b * jmax * 2..b * jmax * 2 + 2 * nj].copy_from_slice(&l.fk);
        }
    }
    Ok(TokenBatch {
        batch: bsz,
        max_joints: jmax,
        width,
        tokens,
        mask,
        joint_counts: counts,
        distance_maps: maps,
        dfs_positions: dfs,
        actions: labelled.then_some(actions),
        fk: labelled.then_some(fk),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::chains;
    use crate::graph::{apply_link_extension, JointSpec};

    fn frame(n: usize, angle: f64, phase: f64) -> ObservationFrame {
        ObservationFrame { joint_angles: vec![angle; n], target_states: vec![angle; n], phase }
    }

    #[test]
    fn phase_zero_encodes_as_sin_cos() {
        let g = chains(&[2]);
        let t = build_tokens(&g, &[frame(2, 0.0, 0.0)], 0).unwrap();
        assert_eq!(&t[0..2], &[0.0, 1.0]);
        assert_eq!(t.len(), 2 * token_width(0));
    }

    #[test]
    fn limits_map_to_unit_interval() {
        let g = chains(&[1]);
        let (lo, hi) = g.joint(0).joint_limit;
        let t_lo = build_tokens(&g, &[frame(1, lo, 0.5)], 0).unwrap();
        let t_hi = build_tokens(&g, &[frame(1, hi, 0.5)], 0).unwrap();
        // o_vl starts after 2 phase entries and the task id
        assert_eq!(t_lo[3], -1.0);
        assert_eq!(t_hi[3], 1.0);
        assert_eq!(t_hi[4], 1.0);
    }

    #[test]
    fn short_history_repeats_oldest_frame() {
        let g = chains(&[2]);
        let newest = frame(2, 0.3, 0.25);
        let oldest = frame(2, -0.1, 0.2);
        let padded = build_tokens(&g, &[newest.clone(), oldest.clone()], 2).unwrap();
        let full = build_tokens(&g, &[newest, oldest.clone(), oldest], 2).unwrap();
        assert_eq!(padded, full);
        assert_eq!(build_tokens(&g, &[], 2), Err(TokenError::EmptyHistory));
        assert!(matches!(build_tokens(&g, &[frame(3, 0.0, 0.0)], 0), Err(TokenError::JointCount { .. })));
    }

    #[test]
    fn geometry_change_touches_only_fixed_block_of_that_joint() {
        let g = chains(&[3, 2]);
        let e = apply_link_extension(&g, &[4], 0.2).unwrap();
        let hist = [frame(5, 0.1, 0.3)];
        let a = build_tokens(&g, &hist, 2).unwrap();
        let b = build_tokens(&e, &hist, 2).unwrap();
        let w = token_width(2);
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            let (j, col) = (i / w, i % w);
            if x != y {
                assert_eq!(j, 4);
                assert!(col >= w - FIXED_LOCAL_WIDTH, "column {col} outside the fixed block");
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn width_is_constant_across_embodiments() {
        use crate::graph::{enumerate_hand_variants, FilterRules, FingerCatalog};
        let graphs = enumerate_hand_variants(&FingerCatalog::desk_hand(), &FilterRules::none()).unwrap();
        for g in graphs.iter().take(40) {
            let n = g.num_joints();
            let t = build_tokens(g, &[frame(n, 0.0, 0.1)], 2).unwrap();
            assert_eq!(t.len(), n * token_width(2));
        }
    }

    #[test]
    fn collate_pads_and_masks() {
        let a = PreparedEmbodiment::new(chains(&[3]));
        let b = PreparedEmbodiment::new(chains(&[3, 2]));
        let ha = [frame(3, 0.2, 0.1)];
        let hb = [frame(5, 0.2, 0.1)];
        let one = collate(&[Sample { embodiment: &a, history: &ha, labels: None }], 2, DfsOrder::Canonical).unwrap();
        assert!(one.mask.iter().all(|&m| m));
        let batch = collate(
            &[
                Sample { embodiment: &a, history: &ha, labels: None },
                Sample { embodiment: &b, history: &hb, labels: None },
            ],
            2,
            DfsOrder::Canonical,
        )
        .unwrap();
        assert_eq!(batch.max_joints, 5);
        assert_eq!(&batch.mask[..5], &[true, true, true, false, false]);
        let w = batch.width;
        assert!(batch.tokens[3 * w..5 * w].iter().all(|&v| v == 0.0));
        assert!(batch.actions.is_none());
        assert_eq!(collate(&[], 2, DfsOrder::Canonical).unwrap_err(), TokenError::EmptyBatch);
    }

    #[test]
    fn root_base_position_is_shared_by_its_chain() {
        let joints = vec![
            JointSpec::new([0.5, -1.0], 1.0, -1.0, 1.0),
            JointSpec::new([1.0, 0.0], 1.0, -1.0, 1.0),
        ];
        let g = EmbodimentGraph::new("g", joints, vec![(0, 1)], vec![]).unwrap();
        let fixed = fixed_local_block(&g);
        assert_eq!(&fixed[6..8], &[0.5, -1.0]);
        assert_eq!(&fixed[14..16], &[0.5, -1.0]);
    }
}
