//! Train and zero-shot evaluation splits.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{is_competent, BenchError, ExpertConfig, TaskSpec};
use crate::graph::{apply_link_extension, EmbodimentGraph};
use crate::numerics::rng::{self, streams};
use crate::tokenizer::PreparedEmbodiment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub train: usize,
    pub new_graph: usize,
    pub new_geo: usize,
    pub new_graph_geo: usize,
    /// Relative link growth applied to extended joints.
    pub extension: f64,
    /// Chance that a given joint is extended; at least one always is.
    pub extension_prob: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 0, train: 40, new_graph: 10, new_geo: 10, new_graph_geo: 10, extension: 0.25, extension_prob: 0.5 }
    }
}

/// Evaluation categories, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "training_graph")]
    TrainingGraph,
    #[serde(rename = "new_graph")]
    NewGraph,
    #[serde(rename = "new_geo")]
    NewGeo,
    #[serde(rename = "new_graph_geo")]
    NewGraphGeo,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::TrainingGraph, Category::NewGraph, Category::NewGeo, Category::NewGraphGeo];

    pub fn label(self) -> &'static str {
        match self {
            Category::TrainingGraph => "Training Graph",
            Category::NewGraph => "New Graph",
            Category::NewGeo => "New Geo",
            Category::NewGraphGeo => "New Graph&Geo",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Category::TrainingGraph => "training_graph",
            Category::NewGraph => "new_graph",
            Category::NewGeo => "new_geo",
            Category::NewGraphGeo => "new_graph_geo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<EmbodimentGraph>,
    pub new_graph: Vec<EmbodimentGraph>,
    pub new_geo: Vec<EmbodimentGraph>,
    pub new_graph_geo: Vec<EmbodimentGraph>,
}

impl Splits {
    pub fn get(&self, c: Category) -> &[EmbodimentGraph] {
        match c {
            Category::TrainingGraph => &self.train,
            Category::NewGraph => &self.new_graph,
            Category::NewGeo => &self.new_geo,
            Category::NewGraphGeo => &self.new_graph_geo,
        }
    }

    /// Every name across all four sets, with duplicates if any.
    pub fn names(&self) -> Vec<&str> {
        Category::ALL.iter().flat_map(|&c| self.get(c).iter().map(|g| g.name())).collect()
    }
}

/// Extends a seeded subset of joints by `extension` of their link length.
/// The result is renamed `<name>+ext`.
pub fn extend_geometry(graph: &EmbodimentGraph, cfg: &SplitConfig) -> Result<EmbodimentGraph, BenchError> {
    let mut r = rng::stream(rng::mix(cfg.seed, graph.name()), streams::EXTENSIONS);
    let n = graph.num_joints();
    let mut picked: Vec<usize> = (0..n).filter(|_| r.random_bool(cfg.extension_prob.clamp(0.0, 1.0))).collect();
    if picked.is_empty() {
        picked.push(r.random_range(0..n));
    }
    // grow each joint on its own so every delta is relative to that link
    let mut g = graph.clone();
    for j in picked {
        let delta = cfg.extension * g.joint(j).link_length;
        g = apply_link_extension(&g, &[j], delta).map_err(|_| BenchError::Parameter("extension"))?;
    }
    Ok(g.with_name(format!("{}+ext", graph.name())))
}

/// Partitions `candidates` by seeded hash of their names. Graphs failing the
/// competence filter, before or after extension, are skipped.
pub fn make_splits(
    candidates: &[EmbodimentGraph],
    task: &TaskSpec,
    expert: &ExpertConfig,
    cfg: &SplitConfig,
) -> Result<(Splits, Vec<String>), BenchError> {
    let ok = |g: &EmbodimentGraph| is_competent(&PreparedEmbodiment::new(g.clone()), task, expert);
    let mut order: Vec<&EmbodimentGraph> = candidates.iter().collect();
    order.sort_by_key(|g| (rng::mix(cfg.seed, g.name()), String::from(g.name())));
    let mut rejected = Vec::new();
    let mut pool = order.into_iter().filter(|g| {
        let keep = ok(g);
        if !keep {
            rejected.push(String::from(g.name()));
        }
        keep
    });
    let mut take = |n: usize| -> Vec<EmbodimentGraph> { pool.by_ref().take(n).cloned().collect() };
    let train = take(cfg.train);
    let new_graph = take(cfg.new_graph);
    let mut new_graph_geo = Vec::new();
    for g in pool.by_ref() {
        if new_graph_geo.len() == cfg.new_graph_geo {
            break;
        }
        let e = extend_geometry(g, cfg)?;
        if ok(&e) {
            new_graph_geo.push(e);
        }
    }
    drop(pool);
    let mut new_geo = Vec::new();
    for g in &train {
        if new_geo.len() == cfg.new_geo {
            break;
        }
        let e = extend_geometry(g, cfg)?;
        if ok(&e) {
            new_geo.push(e);
        }
    }
    let splits = Splits { train, new_graph, new_geo, new_graph_geo };
    let want = [cfg.train, cfg.new_graph, cfg.new_geo, cfg.new_graph_geo];
    if Category::ALL.iter().zip(want).any(|(&c, w)| splits.get(c).len() < w) {
        return Err(BenchError::NotEnoughEmbodiments);
    }
    Ok((splits, rejected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{enumerate_hand_variants, FilterRules, FingerCatalog};

    #[test]
    fn default_splits_are_disjoint_and_full() {
        let graphs = enumerate_hand_variants(&FingerCatalog::desk_hand(), &FilterRules::none()).unwrap();
        let cfg = SplitConfig::default();
        let (s, rejected) = make_splits(&graphs, &TaskSpec::default(), &ExpertConfig::default(), &cfg).unwrap();
        assert_eq!([s.train.len(), s.new_graph.len(), s.new_geo.len(), s.new_graph_geo.len()], [40, 10, 10, 10]);
        let mut names = s.names();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 70);
        let base = |n: &str| String::from(n.trim_end_matches("+ext"));
        for g in &s.new_geo {
            assert!(s.train.iter().any(|t| t.name() == base(g.name())));
            assert_ne!(g, s.train.iter().find(|t| t.name() == base(g.name())).unwrap());
        }
        for g in s.new_graph.iter().chain(&s.new_graph_geo) {
            assert!(s.train.iter().all(|t| t.name() != base(g.name())));
        }
        assert!(!rejected.is_empty());
        let again = make_splits(&graphs, &TaskSpec::default(), &ExpertConfig::default(), &cfg).unwrap();
        assert_eq!(again.0, s);
    }

    #[test]
    fn extension_grows_links_by_a_quarter() {
        let graphs = enumerate_hand_variants(&FingerCatalog::desk_hand(), &FilterRules::none()).unwrap();
        let g = &graphs[1];
        let e = extend_geometry(g, &SplitConfig::default()).unwrap();
        let mut grown = 0;
        for (a, b) in g.joints().iter().zip(e.joints()) {
            if b.link_length != a.link_length {
                assert!((b.link_length - 1.25 * a.link_length).abs() < 1e-12);
                grown += 1;
            }
        }
        assert!(grown >= 1);
    }
}
