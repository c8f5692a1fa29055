//! Procedural hand variants: every combination of main-finger and thumb
//! templates, filtered by simple competence rules.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{EmbodimentGraph, GraphError, JointSpec};

/// One finger template. The first joint's offset is relative to the finger
/// mount; later offsets are relative to the previous joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerVariant {
    pub name: String,
    pub joints: Vec<JointSpec>,
}

impl FingerVariant {
    pub fn none() -> Self {
        Self { name: "none".into(), joints: Vec::new() }
    }

    /// First `keep` joints of a straight finger with the given link lengths.
    pub fn prefix(name: &str, links: &[f64], keep: usize, limits: (f64, f64)) -> Self {
        let joints = (0..keep)
            .map(|k| {
                let offset = if k == 0 { [0.0, 0.0] } else { [links[k - 1], 0.0] };
                JointSpec::new(offset, links[k], limits.0, limits.1)
            })
            .collect();
        Self { name: name.into(), joints }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerCatalog {
    /// Variants offered to every main-finger slot.
    pub main_variants: Vec<FingerVariant>,
    pub thumb_variants: Vec<FingerVariant>,
    /// Mount position of each main-finger slot; its length fixes the slot count.
    pub main_mounts: Vec<[f64; 2]>,
    pub thumb_mount: [f64; 2],
}

impl FingerCatalog {
    /// Planar four-finger hand: three identical main fingers and a thumb,
    /// every finger pointing along +x at zero angles.
    ///
    /// Main variants keep 0, 4, 3, 2 or 1 joints of the finger; the thumb
    /// keeps 3 or 2.
    pub fn desk_hand() -> Self {
        Self::desk_hand_with(&[0.25, 0.25, 0.25, 0.25], &[0.25, 0.25, 0.25])
    }

    pub fn desk_hand_with(main_links: &[f64; 4], thumb_links: &[f64; 3]) -> Self {
        let limits = (-0.6, 1.6);
        Self {
            main_variants: vec![
                FingerVariant::none(),
                FingerVariant::prefix("full", main_links, 4, limits),
                FingerVariant::prefix("notip", main_links, 3, limits),
                FingerVariant::prefix("pair", main_links, 2, limits),
                FingerVariant::prefix("stub", main_links, 1, limits),
            ],
            thumb_variants: vec![
                FingerVariant::prefix("thumb", thumb_links, 3, limits),
                FingerVariant::prefix("thumb2", thumb_links, 2, limits),
            ],
            main_mounts: vec![[0.0, 0.5], [0.0, 0.0], [0.0, -0.5]],
            thumb_mount: [-0.35, -1.0],
        }
    }

    /// Number of configurations before filtering.
    pub fn combinations(&self) -> usize {
        self.main_variants.len().pow(self.main_mounts.len() as u32) * self.thumb_variants.len()
    }

    fn check(&self) -> Result<(), GraphError> {
        if self.main_variants.is_empty() || self.thumb_variants.is_empty() {
            return Err(GraphError::EmptyCatalog);
        }
        Ok(())
    }
}

/// How "a main finger with two joints" is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoJointRule {
    Exactly,
    AtLeast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRules {
    /// Minimum number of fingers (thumb included) with at least one joint.
    pub min_fingers_with_joints: usize,
    /// Require some main finger to have two joints under this reading.
    pub main_finger_two_joints: Option<TwoJointRule>,
}

impl FilterRules {
    pub fn none() -> Self {
        Self { min_fingers_with_joints: 0, main_finger_two_joints: None }
    }

    /// At least two fingers with a joint and a main finger with two joints.
    pub fn hand(rule: TwoJointRule) -> Self {
        Self { min_fingers_with_joints: 2, main_finger_two_joints: Some(rule) }
    }

    fn accepts(&self, mains: &[usize], thumb: usize) -> bool {
        let populated = mains.iter().chain(core::iter::once(&thumb)).filter(|&&c| c > 0).count();
        if populated < self.min_fingers_with_joints {
            return false;
        }
        match self.main_finger_two_joints {
            None => true,
            Some(TwoJointRule::Exactly) => mains.contains(&2),
            Some(TwoJointRule::AtLeast) => mains.iter().any(|&c| c >= 2),
        }
    }
}

/// Cartesian product of main-slot variants and thumb variants, filtered.
///
/// Ordering is lexicographic over (main slot 0, main slot 1, ..., thumb)
/// variant indices. Joints are numbered finger by finger, thumb last, and
/// the chain roots are linked in that order by a path of root edges.
pub fn enumerate_hand_variants(
    catalog: &FingerCatalog,
    filters: &FilterRules,
) -> Result<Vec<EmbodimentGraph>, GraphError> {
    catalog.check()?;
    let slots = catalog.main_mounts.len();
    let nm = catalog.main_variants.len();
    let mut out = Vec::new();
    let mut pick = vec![0usize; slots];
    loop {
        for (t, thumb) in catalog.thumb_variants.iter().enumerate() {
            let counts: Vec<usize> =
                pick.iter().map(|&v| catalog.main_variants[v].joint_count()).collect();
            if filters.accepts(&counts, thumb.joint_count()) {
                if let Some(g) = assemble(catalog, &pick, t)? {
                    out.push(g);
                }
            }
        }
        // odometer increment, last slot fastest
        let mut k = slots;
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            pick[k] += 1;
            if pick[k] < nm {
                break;
            }
            pick[k] = 0;
        }
    }
}

fn assemble(
    catalog: &FingerCatalog,
    mains: &[usize],
    thumb: usize,
) -> Result<Option<EmbodimentGraph>, GraphError> {
    let mut fingers: Vec<(&FingerVariant, [f64; 2])> = mains
        .iter()
        .zip(&catalog.main_mounts)
        .map(|(&v, &m)| (&catalog.main_variants[v], m))
        .collect();
    fingers.push((&catalog.thumb_variants[thumb], catalog.thumb_mount));

    let mut joints = Vec::new();
    let mut edges = Vec::new();
    let mut roots = Vec::new();
    for (variant, mount) in &fingers {
        for (k, spec) in variant.joints.iter().enumerate() {
            let mut spec = spec.clone();
            let idx = joints.len();
            if k == 0 {
                spec.offset_from_parent =
                    [mount[0] + spec.offset_from_parent[0], mount[1] + spec.offset_from_parent[1]];
                roots.push(idx);
            } else {
                edges.push((idx - 1, idx));
            }
            joints.push(spec);
        }
    }
    if joints.is_empty() {
        return Ok(None);
    }
    let name = fingers.iter().map(|(v, _)| v.name.as_str()).collect::<Vec<_>>().join("-");
    let root_edges = roots.windows(2).map(|w| (w[0], w[1])).collect();
    EmbodimentGraph::new(name, joints, edges, root_edges).map(Some)
}

/// Counts under each reading of the two-joint rule, compared with the
/// 236-variant target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationReport {
    pub pre_filter: usize,
    pub post_filter_exactly_two: usize,
    pub post_filter_at_least_two: usize,
    pub target: usize,
    pub exactly_two_matches: bool,
    pub at_least_two_matches: bool,
    pub assumptions: Vec<String>,
}

pub fn enumeration_report(catalog: &FingerCatalog) -> Result<EnumerationReport, GraphError> {
    const TARGET: usize = 236;
    let pre = enumerate_hand_variants(catalog, &FilterRules::none())?.len();
    let exactly = enumerate_hand_variants(catalog, &FilterRules::hand(TwoJointRule::Exactly))?.len();
    let at_least =
        enumerate_hand_variants(catalog, &FilterRules::hand(TwoJointRule::AtLeast))?.len();
    let describe = |vs: &[FingerVariant]| {
        vs.iter().map(|v| format!("{}={}", v.name, v.joint_count())).collect::<Vec<_>>().join(", ")
    };
    let assumptions = vec![
        format!("main-finger variant joint counts: {}", describe(&catalog.main_variants)),
        format!("thumb variant joint counts: {}", describe(&catalog.thumb_variants)),
        "rule 1 counts the thumb as a finger".into(),
        "rule 2 only inspects main fingers".into(),
    ];
    Ok(EnumerationReport {
        pre_filter: pre,
        post_filter_exactly_two: exactly,
        post_filter_at_least_two: at_least,
        target: TARGET,
        exactly_two_matches: exactly == TARGET,
        at_least_two_matches: at_least == TARGET,
        assumptions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::compute_distance_maps;

    #[test]
    fn unfiltered_desk_hand_has_250_graphs() {
        let cat = FingerCatalog::desk_hand();
        assert_eq!(cat.combinations(), 250);
        let all = enumerate_hand_variants(&cat, &FilterRules::none()).unwrap();
        assert_eq!(all.len(), 250);
        let mut names: Vec<_> = all.iter().map(|g| g.name().to_string()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 250);
    }

    #[test]
    fn single_variant_catalog_gives_one_graph() {
        let mut cat = FingerCatalog::desk_hand();
        cat.main_variants.truncate(2);
        cat.main_variants.remove(0);
        cat.thumb_variants.truncate(1);
        let all = enumerate_hand_variants(&cat, &FilterRules::none()).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].num_joints(), 15);
    }

    #[test]
    fn empty_catalog_is_rejected() {
        let mut cat = FingerCatalog::desk_hand();
        cat.thumb_variants.clear();
        assert_eq!(
            enumerate_hand_variants(&cat, &FilterRules::none()),
            Err(GraphError::EmptyCatalog)
        );
    }

    #[test]
    fn filter_counts_follow_closed_form() {
        // Thumbs always carry joints, so rule 1 only removes the all-empty
        // main triple, which rule 2 removes anyway. Rule 2 removes every
        // triple without a qualifying finger: (5 - k)^3 per thumb.
        let cat = FingerCatalog::desk_hand();
        let r = enumeration_report(&cat).unwrap();
        assert_eq!(r.pre_filter, 250);
        // exactly two joints: only "pair" qualifies, k = 1
        assert_eq!(r.post_filter_exactly_two, 250 - 2 * 4 * 4 * 4);
        // at least two: full, notip, pair qualify, k = 3
        assert_eq!(r.post_filter_at_least_two, 250 - 2 * 2 * 2 * 2);
        assert!(!r.exactly_two_matches && !r.at_least_two_matches);
    }

    #[test]
    fn count_invariant_to_variant_order() {
        let cat = FingerCatalog::desk_hand();
        let mut rev = cat.clone();
        rev.main_variants.reverse();
        rev.thumb_variants.reverse();
        for rules in [
            FilterRules::none(),
            FilterRules::hand(TwoJointRule::Exactly),
            FilterRules::hand(TwoJointRule::AtLeast),
        ] {
            assert_eq!(
                enumerate_hand_variants(&cat, &rules).unwrap().len(),
                enumerate_hand_variants(&rev, &rules).unwrap().len()
            );
        }
    }

    #[test]
    fn root_edges_form_a_path_over_chain_roots() {
        let cat = FingerCatalog::desk_hand();
        for g in enumerate_hand_variants(&cat, &FilterRules::none()).unwrap() {
            let roots = g.roots();
            assert_eq!(g.root_edges().len(), roots.len() - 1);
            for (w, e) in roots.windows(2).zip(g.root_edges()) {
                assert_eq!((w[0], w[1]), *e);
            }
            let m = compute_distance_maps(&g);
            assert!(m.max_spd() <= 16);
        }
    }
}
