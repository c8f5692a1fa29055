//! Planar fingertip-tracking benchmark.
//!
//! Every fingertip follows a circle around the point it occupies at the home
//! pose, one revolution per cycle. An embodiment-specific expert steers the
//! running joint targets with damped least squares; the low-level controller
//! is ideal, so joint angles equal their targets after each step.

mod expert;
mod fk;
mod splits;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use expert::{expert_policy, ExpertConfig};
pub use fk::{fk_oracle, Fk};
pub use splits::{extend_geometry, make_splits, Category, SplitConfig, Splits};

use crate::graph::EmbodimentGraph;
use crate::math;
use crate::numerics::rng::{self, streams, Rng64};
use crate::tokenizer::{ObservationFrame, PreparedEmbodiment};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("episode length {0} is not a multiple of the cycle period {1}")]
    EpisodeLength(usize, usize),
    #[error("invalid task parameter {0}")]
    Parameter(&'static str),
    #[error("target circle of leaf {leaf} in {name} is out of reach")]
    Reach { name: String, leaf: usize },
    #[error("no embodiment passed the competence filter")]
    NothingKept,
    #[error("too few competent embodiments to fill every split")]
    NotEnoughEmbodiments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    /// Steps per revolution.
    pub cycle_period: usize,
    pub target_radius: f64,
    /// Phase offset of each chain, in cycles, by ascending root index.
    /// Missing entries are zero.
    pub phase_offsets: Vec<f64>,
    pub episode_length: usize,
    /// Seconds per control step.
    pub dt: f64,
    /// Angle of every joint at the home pose, clamped to its limits.
    pub home_angle: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            cycle_period: 40,
            target_radius: 0.05,
            phase_offsets: Vec::new(),
            episode_length: 80,
            dt: 0.05,
            home_angle: 1.2,
        }
    }
}

/// Per-embodiment circle centers and chain offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGeometry {
    pub centers: Vec<[f64; 2]>,
    pub offsets: Vec<f64>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.cycle_period == 0 {
            return Err(BenchError::Parameter("cycle_period"));
        }
        if self.episode_length == 0 || !self.episode_length.is_multiple_of(self.cycle_period) {
            return Err(BenchError::EpisodeLength(self.episode_length, self.cycle_period));
        }
        if !(self.target_radius > 0.0 && self.target_radius.is_finite()) {
            return Err(BenchError::Parameter("target_radius"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(BenchError::Parameter("dt"));
        }
        if !self.home_angle.is_finite() || self.phase_offsets.iter().any(|p| !p.is_finite()) {
            return Err(BenchError::Parameter("home_angle"));
        }
        Ok(())
    }

    pub fn home_pose(&self, graph: &EmbodimentGraph) -> Vec<f64> {
        graph
            .joints()
            .iter()
            .map(|j| self.home_angle.clamp(j.joint_limit.0, j.joint_limit.1))
            .collect()
    }

    /// Phase of step `t` in `[0, 1)`.
    pub fn phase(&self, t: usize) -> f64 {
        (t % self.cycle_period) as f64 / self.cycle_period as f64
    }

    pub fn geometry(&self, graph: &EmbodimentGraph) -> TaskGeometry {
        let roots = graph.roots();
        let centers = fk_oracle(graph, &self.home_pose(graph)).tips;
        let offsets = graph
            .leaves()
            .iter()
            .map(|&l| {
                let c = roots.iter().position(|&r| r == graph.chain_root(l)).unwrap_or(0);
                self.phase_offsets.get(c).copied().unwrap_or(0.0)
            })
            .collect();
        TaskGeometry { centers, offsets }
    }

    /// Goal of every leaf at step `t`.
    pub fn goals(&self, geo: &TaskGeometry, t: usize) -> Vec<[f64; 2]> {
        let phase = self.phase(t);
        geo.centers
            .iter()
            .zip(&geo.offsets)
            .map(|(c, off)| {
                let a = math::TAU * (phase + off);
                [c[0] + self.target_radius * math::cos(a), c[1] + self.target_radius * math::sin(a)]
            })
            .collect()
    }

    /// Checks that every target circle lies inside the annulus its chain can
    /// reach.
    pub fn check_reach(&self, graph: &EmbodimentGraph) -> Result<(), BenchError> {
        let geo = self.geometry(graph);
        for (t, &leaf) in graph.leaves().iter().enumerate() {
            let path = graph.ancestry(leaf);
            let root = *path.last().unwrap();
            let mut segs: Vec<f64> = path[..path.len() - 1]
                .iter()
                .map(|&j| {
                    let o = graph.joint(j).offset_from_parent;
                    math::hypot(o[0], o[1])
                })
                .collect();
            segs.push(graph.joint(leaf).link_length);
            let total: f64 = segs.iter().sum();
            let longest = segs.iter().copied().fold(0.0, f64::max);
            let inner = (2.0 * longest - total).max(0.0);
            let base = graph.joint(root).offset_from_parent;
            let c = geo.centers[t];
            let d = math::hypot(c[0] - base[0], c[1] - base[1]);
            if d + self.target_radius >= total || d - self.target_radius <= inner {
                return Err(BenchError::Reach { name: graph.name().into(), leaf });
            }
        }
        Ok(())
    }
}

/// Uniform draw from the middle 80% of every joint range.
pub fn sample_initial_angles(graph: &EmbodimentGraph, rng: &mut Rng64) -> Vec<f64> {
    graph
        .joints()
        .iter()
        .map(|j| {
            let (lo, hi) = j.joint_limit;
            let m = 0.1 * (hi - lo);
            rng.random_range(lo + m..hi - m)
        })
        .collect()
}

/// Seeded episode starts for one embodiment. Demo generation and evaluation
/// both draw from here, so the same seed replays the same episodes.
pub fn episode_starts(graph: &EmbodimentGraph, seed: u64, count: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(rng::mix(seed, graph.name()), streams::EPISODES);
    (0..count).map(|_| sample_initial_angles(graph, &mut r)).collect()
}

/// What a policy sees for one episode at one step.
#[derive(Debug, Clone, Copy)]
pub struct StepObs<'a> {
    pub embodiment: &'a PreparedEmbodiment,
    /// Newest first.
    pub history: &'a [ObservationFrame],
    /// Next-step goal of every leaf. Only experts may read this.
    pub goals: &'a [[f64; 2]],
}

/// Maps a batch of observations to delta joint targets.
pub trait Policy {
    type Error;
    fn act(&mut self, obs: &[StepObs<'_>]) -> Result<Vec<Vec<f64>>, Self::Error>;
}

/// The analytic expert behind [`Policy`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Expert(pub ExpertConfig);

impl Policy for Expert {
    type Error = core::convert::Infallible;
    fn act(&mut self, obs: &[StepObs<'_>]) -> Result<Vec<Vec<f64>>, Self::Error> {
        Ok(obs.iter().map(|o| expert_policy(&o.embodiment.graph, &o.history[0], o.goals, &self.0)).collect())
    }
}

/// Holds every target in place.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    type Error = core::convert::Infallible;
    fn act(&mut self, obs: &[StepObs<'_>]) -> Result<Vec<Vec<f64>>, Self::Error> {
        Ok(obs.iter().map(|o| vec![0.0; o.embodiment.num_joints()]).collect())
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeSpec<'a> {
    pub embodiment: &'a PreparedEmbodiment,
    pub initial_angles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    /// Mean fingertip distance to goal after each step.
    pub step_errors: Vec<f64>,
    pub mean_error: f64,
    /// Steps whose error exceeds the target radius.
    pub drops: usize,
    /// Set when the policy produced a malformed or non-finite action; such
    /// steps hold the targets still.
    pub failed: bool,
}

struct Live<'a> {
    emb: &'a PreparedEmbodiment,
    geo: TaskGeometry,
    history: Vec<ObservationFrame>,
    goals: Vec<[f64; 2]>,
    result: EpisodeResult,
}

/// Runs all episodes in lockstep, one policy call per step.
///
/// `on_step(episode, step, obs, actions)` sees every accepted action before
/// it is applied.
pub fn run_episodes<P: Policy>(
    task: &TaskSpec,
    history: usize,
    specs: &[EpisodeSpec<'_>],
    policy: &mut P,
    mut on_step: impl FnMut(usize, usize, &StepObs<'_>, &[f64]),
) -> Result<Vec<EpisodeResult>, P::Error> {
    let mut live: Vec<Live> = specs
        .iter()
        .map(|s| {
            let geo = task.geometry(&s.embodiment.graph);
            let goals = task.goals(&geo, 1);
            Live {
                emb: s.embodiment,
                geo,
                history: vec![ObservationFrame {
                    joint_angles: s.initial_angles.clone(),
                    target_states: s.initial_angles.clone(),
                    phase: task.phase(0),
                }],
                goals,
                result: EpisodeResult {
                    step_errors: Vec::with_capacity(task.episode_length),
                    mean_error: 0.0,
                    drops: 0,
                    failed: false,
                },
            }
        })
        .collect();
    for t in 0..task.episode_length {
        let actions = {
            let obs: Vec<StepObs> = live
                .iter()
                .map(|l| StepObs { embodiment: l.emb, history: &l.history, goals: &l.goals })
                .collect();
            policy.act(&obs)?
        };
        for (e, l) in live.iter_mut().enumerate() {
            let n = l.emb.num_joints();
            let cur = &l.history[0];
            let ok = actions.get(e).is_some_and(|a| a.len() == n && a.iter().all(|v| v.is_finite()));
            let delta = if ok {
                let obs = StepObs { embodiment: l.emb, history: &l.history, goals: &l.goals };
                on_step(e, t, &obs, &actions[e]);
                actions[e].clone()
            } else {
                l.result.failed = true;
                vec![0.0; n]
            };
            let targets: Vec<f64> = cur
                .target_states
                .iter()
                .zip(&delta)
                .zip(l.emb.graph.joints())
                .map(|((q, d), j)| (q + d).clamp(j.joint_limit.0, j.joint_limit.1))
                .collect();
            let tips = fk_oracle(&l.emb.graph, &targets).tips;
            let err = tips
                .iter()
                .zip(&l.goals)
                .map(|(p, g)| math::hypot(p[0] - g[0], p[1] - g[1]))
                .sum::<f64>()
                / tips.len() as f64;
            l.result.step_errors.push(err);
            if err > task.target_radius {
                l.result.drops += 1;
            }
            l.history.insert(0, ObservationFrame { joint_angles: targets.clone(), target_states: targets, phase: task.phase(t + 1) });
            l.history.truncate(history + 1);
            l.goals = task.goals(&l.geo, t + 2);
        }
    }
    Ok(live
        .into_iter()
        .map(|l| {
            let mut r = l.result;
            r.mean_error = r.step_errors.iter().sum::<f64>() / r.step_errors.len().max(1) as f64;
            r
        })
        .collect())
}

/// Expert tracking error over one episode from the home pose.
pub fn competence_error(emb: &PreparedEmbodiment, task: &TaskSpec, expert: &ExpertConfig) -> f64 {
    let spec = EpisodeSpec { embodiment: emb, initial_angles: task.home_pose(&emb.graph) };
    let Ok(r) = run_episodes(task, 0, &[spec], &mut Expert(*expert), |_, _, _, _| {});
    r[0].mean_error
}

/// Competence threshold as a fraction of the target radius.
pub const COMPETENCE_FRACTION: f64 = 0.1;

pub fn is_competent(emb: &PreparedEmbodiment, task: &TaskSpec, expert: &ExpertConfig) -> bool {
    task.check_reach(&emb.graph).is_ok() && competence_error(emb, task, expert) < COMPETENCE_FRACTION * task.target_radius
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub steps_per_embodiment: usize,
    pub history: usize,
    pub seed: u64,
    pub expert: ExpertConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { steps_per_embodiment: 2000, history: 2, seed: 0, expert: ExpertConfig::default() }
    }
}

/// One supervised step.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoRecord {
    pub embodiment: usize,
    /// Exactly `history + 1` frames, newest first; missing frames repeat the
    /// oldest one.
    pub history: Vec<ObservationFrame>,
    pub actions: Vec<f64>,
    /// Joint positions at the newest frame, `J x 2`.
    pub fk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub history: usize,
    pub embodiments: Vec<EmbodimentGraph>,
    pub records: Vec<DemoRecord>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("record {0} refers to a missing embodiment")]
    Embodiment(usize),
    #[error("record {0} has the wrong shape")]
    Shape(usize),
    #[error("record {record}: stored FK differs from the oracle by {error}")]
    Fk { record: usize, error: f64 },
}

impl DemoDataset {
    /// Re-derives every FK target from the stored angles.
    pub fn verify(&self, tolerance: f64) -> Result<(), DatasetError> {
        for (i, r) in self.records.iter().enumerate() {
            let g = self.embodiments.get(r.embodiment).ok_or(DatasetError::Embodiment(i))?;
            let n = g.num_joints();
            let shape_ok = r.history.len() == self.history + 1
                && r.history.iter().all(|f| f.joint_angles.len() == n && f.target_states.len() == n)
                && r.actions.len() == n
                && r.fk.len() == 2 * n;
            if !shape_ok {
                return Err(DatasetError::Shape(i));
            }
            let want = fk_oracle(g, &r.history[0].joint_angles).flat_joints();
            let error = want.iter().zip(&r.fk).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if !(error <= tolerance) {
                return Err(DatasetError::Fk { record: i, error });
            }
        }
        Ok(())
    }

    pub fn records_per_embodiment(&self) -> Vec<usize> {
        let mut c = vec![0; self.embodiments.len()];
        for r in &self.records {
            c[r.embodiment] += 1;
        }
        c
    }
}

/// Expert demonstrations for one embodiment, plus the expert's mean
/// tracking error over those episodes.
pub fn demos_for_embodiment(emb: &PreparedEmbodiment, index: usize, task: &TaskSpec, cfg: &DemoConfig) -> (Vec<DemoRecord>, f64) {
    let episodes = cfg.steps_per_embodiment.div_ceil(task.episode_length);
    let starts = episode_starts(&emb.graph, cfg.seed, episodes);
    let specs: Vec<EpisodeSpec> = starts.into_iter().map(|q| EpisodeSpec { embodiment: emb, initial_angles: q }).collect();
    let mut slots: Vec<Option<DemoRecord>> = vec![None; episodes * task.episode_length];
    let Ok(results) = run_episodes(task, cfg.history, &specs, &mut Expert(cfg.expert), |e, t, obs, act| {
        let mut history = obs.history.to_vec();
        let oldest = history.last().cloned().expect("history is never empty");
        history.resize(cfg.history + 1, oldest);
        slots[e * task.episode_length + t] = Some(DemoRecord {
            embodiment: index,
            fk: fk_oracle(&emb.graph, &obs.history[0].joint_angles).flat_joints(),
            history,
            actions: act.to_vec(),
        });
    });
    let records = slots.into_iter().flatten().take(cfg.steps_per_embodiment).collect();
    let mean = results.iter().map(|r| r.mean_error).sum::<f64>() / results.len().max(1) as f64;
    (records, mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    pub dataset: DemoDataset,
    /// Names and probe errors of embodiments failing the competence filter.
    pub excluded: Vec<(String, f64)>,
    /// Expert mean tracking error per kept embodiment.
    pub expert_errors: Vec<f64>,
}

/// Sequential demo generation; embodiments that fail the competence filter
/// are left out and reported.
pub fn generate_demos(graphs: &[EmbodimentGraph], task: &TaskSpec, cfg: &DemoConfig) -> Result<DemoReport, BenchError> {
    task.validate()?;
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for g in graphs {
        let emb = PreparedEmbodiment::new(g.clone());
        if is_competent(&emb, task, &cfg.expert) {
            kept.push(emb);
        } else {
            excluded.push((String::from(g.name()), competence_error(&emb, task, &cfg.expert)));
        }
    }
    if kept.is_empty() {
        return Err(BenchError::NothingKept);
    }
    let mut records = Vec::new();
    let mut expert_errors = Vec::new();
    for (i, emb) in kept.iter().enumerate() {
        let (r, e) = demos_for_embodiment(emb, i, task, cfg);
        records.extend(r);
        expert_errors.push(e);
    }
    Ok(DemoReport {
        dataset: DemoDataset {
            history: cfg.history,
            embodiments: kept.into_iter().map(|e| e.graph).collect(),
            records,
        },
        excluded,
        expert_errors,
    })
}
